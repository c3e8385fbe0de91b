use std::path::Path;
use std::process::Command;

fn electsim(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_electsim")).current_dir(dir).args(args).output().expect("spawn electsim");
    assert!(out.status.success(), "electsim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn state_pipeline(dir: &Path) {
    electsim(dir, &["demo", "--out", ".", "--seed", "4"]);
    electsim(dir, &["fit", "--marginals", "marginals", "--pool", "pool_tagged.jsonl", "--out", "joint"]);
    electsim(dir, &["sample", "--joint", "joint", "--pool", "pool_tagged.jsonl", "--census", "census.csv", "--out", "samples"]);
    electsim(
        dir,
        &[
            "simulate", "--mode", "state", "--sample", "samples", "--questionnaire", "questionnaire.json",
            "--prompt-config", "prompt_b3.json", "--backend", "backend.json", "--out", "run",
        ],
    );
    let eval = electsim(dir, &["evaluate", "--run", "run", "--actual", "actual.csv", "--out", "eval"]);
    assert!(eval.contains("CER"), "{eval}");
}

#[test]
fn state_wise_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    state_pipeline(a.path());
    state_pipeline(b.path());
    for f in ["run/manifest.json", "run/responses.jsonl", "run/states.json", "eval/report.json", "eval/states.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn ingest_annotate_and_voter_wise_run() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    electsim(dir, &["demo", "--out", "."]);
    let ingest = electsim(
        dir,
        &["ingest", "--input", "posts.jsonl", "--output", "pool.jsonl", "--min-posts", "8", "--sample", "5", "--report", "clean.json"],
    );
    assert!(ingest.contains("users in pool"), "{ingest}");
    assert!(dir.join("clean.json").exists());
    let ann = electsim(dir, &["annotate", "--pool", "pool.jsonl", "--backends", "backend.json", "--out", "tagged.jsonl"]);
    assert!(ann.contains("fully tagged"), "{ann}");
    electsim(
        dir,
        &[
            "simulate", "--mode", "voter", "--sample", "respondents.jsonl", "--questionnaire", "questionnaire.json",
            "--backend", "backend.json", "--respondents", "20", "--out", "run",
        ],
    );
    let eval = electsim(dir, &["evaluate", "--run", "run", "--gold", "respondents.jsonl", "--out", "eval"]);
    assert!(eval.contains("micro-F1"), "{eval}");
}

#[test]
fn bad_input_reports_an_error() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_electsim"))
        .current_dir(d.path())
        .args(["fit", "--marginals", "missing", "--out", "joint"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
