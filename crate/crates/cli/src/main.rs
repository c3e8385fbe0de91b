//! `electsim` command-line driver.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use electsim_core::annotate::{annotate_pool, load_gold, consistency_score, tag_distribution, AnnotationCache, TaggedUser, VoteRule};
use electsim_core::corpus::{
    read_jsonl, run_pipeline, write_jsonl, CleaningConfig, EnglishStopwordDetector, PipelineConfig, RawPost, UserRecord,
};
use electsim_core::distribution::{
    fit_states, load_marginals_dir, GapReport, IpfOptions, JointTable, SeedKind, DEFAULT_GAP_THRESHOLD,
};
use electsim_core::engine::backend::{BackendClient, BackendConfig};
use electsim_core::engine::prompt::PromptConfig;
use electsim_core::engine::run::{read_run, run_state_wise, run_voter_wise, select_respondents, write_run};
use electsim_core::metrics::{evaluate, load_actual, write_report, DivergenceKind};
use electsim_core::questionnaire::{load_questionnaire, RespondentRecord};
use electsim_core::sampler::{build_plan, draw, draw_random, load_census, PoolIndex, VoterProfile};
use electsim_core::synthetic;
use electsim_core::taxonomy::{Attribute, Tags};
use electsim_service::{AppState, RunRegistry};

#[derive(Parser)]
#[command(name = "electsim", version, about = "Election simulation over a tagged social-media voter pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Voter,
    State,
}

#[derive(Clone, Copy, ValueEnum)]
enum Vote {
    Majority,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum Divergence {
    SymmetrizedKl,
    JensenShannon,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a raw post export into a voter pool.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 30)]
        min_posts: usize,
        #[arg(long, default_value_t = 30)]
        sample: usize,
        #[arg(long, default_value_t = 0.28)]
        jaccard_threshold: f64,
        #[arg(long, default_value = "en")]
        lang: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        shards: usize,
    },
    /// Tag pool users with demographic labels through one or more backends.
    Annotate {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        backends: PathBuf,
        #[arg(long, value_enum, default_value = "majority")]
        vote: Vote,
        #[arg(long)]
        out: PathBuf,
        /// Response cache (JSON Lines), read and updated in place.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Gold labels; prints per-attribute consistency scores.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Fit per-state joint distributions to census marginals.
    Fit {
        #[arg(long)]
        marginals: PathBuf,
        /// Tagged pool used as the seed table; omit for a uniform seed.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
    },
    /// Draw per-state persona samples.
    Sample {
        #[arg(long)]
        joint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        census: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Draw uniformly from the pool, ignoring the joint distribution.
        #[arg(long)]
        random: bool,
    },
    /// Poll personas through a chat backend.
    Simulate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// State mode: directory of per-state sample files. Voter mode: respondents JSON Lines.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        questionnaire: PathBuf,
        #[arg(long)]
        prompt_config: Option<PathBuf>,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Voter mode: number of respondents drawn.
        #[arg(long, default_value_t = 1000)]
        respondents: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a finished run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        actual: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "symmetrized-kl")]
        divergence: Divergence,
    },
    /// Serve runs over HTTP.
    Serve {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = electsim_service::DEFAULT_CROSSTAB_CAP)]
        crosstab_cap: usize,
    },
    /// Write a small synthetic input set for trying the pipeline.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn single_backend(path: &Path) -> Result<BackendClient> {
    let mut configs = BackendConfig::load_many(path)?;
    if configs.len() != 1 {
        bail!("{}: expected exactly one backend config, found {}", path.display(), configs.len());
    }
    Ok(BackendClient::from_config(configs.remove(0))?)
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, output, min_posts, sample, jaccard_threshold, lang, seed, report, shards } => {
            let cfg = PipelineConfig {
                input,
                output,
                report,
                cleaning: CleaningConfig {
                    lang,
                    min_posts,
                    sample_size: sample,
                    jaccard_threshold,
                    seed,
                    shards,
                    ..CleaningConfig::default()
                },
            };
            let (pool, report) = run_pipeline(&cfg, &EnglishStopwordDetector::default())?;
            println!(
                "{} posts from {} users -> {} users in pool ({} malformed records)",
                report.input_posts,
                report.input_users,
                pool.len(),
                report.malformed_records
            );
        }
        Command::Annotate { pool, backends, vote, out, cache, gold } => {
            let users: Vec<UserRecord> = read_jsonl(&pool)?;
            let configs = BackendConfig::load_many(&backends)?;
            let in_flight = configs.iter().map(|c| c.max_in_flight).max().unwrap_or(8);
            let clients = configs.into_iter().map(BackendClient::from_config).collect::<Result<Vec<_>, _>>()?;
            let store = match &cache {
                Some(p) => AnnotationCache::load(p)?,
                None => AnnotationCache::default(),
            };
            let rule = match vote {
                Vote::Majority => VoteRule::Majority,
                Vote::First => VoteRule::First,
            };
            let (tagged, results) = annotate_pool(&users, &clients, &store, rule, in_flight).await;
            write_jsonl(&out, &tagged)?;
            if let Some(p) = &cache {
                store.save(p)?;
            }
            let failures = results.iter().filter(|r| r.error.is_some()).count();
            let complete = tagged.iter().filter(|t| t.tags.is_complete()).count();
            println!("annotated {} users ({complete} fully tagged, {failures} failed backend calls)", tagged.len());
            for (attr, counts) in tag_distribution(&tagged) {
                println!("  {attr}: {counts:?}");
            }
            if let Some(g) = gold {
                let gold = load_gold(&g)?;
                let preds: BTreeMap<String, Tags> = tagged.iter().map(|t| (t.user.user_id.clone(), t.tags)).collect();
                for attr in Attribute::ALL {
                    match consistency_score(&preds, &gold, attr) {
                        Some(s) => println!("  consistency {attr}: {s:.4}"),
                        None => println!("  consistency {attr}: no gold labels"),
                    }
                }
            }
        }
        Command::Fit { marginals, pool, out, tol, max_iter } => {
            let targets = load_marginals_dir(&marginals)?;
            let (tags, kind) = match &pool {
                Some(p) => (read_jsonl::<TaggedUser>(p)?.into_iter().map(|u| u.tags).collect(), SeedKind::Pool),
                None => (Vec::new(), SeedKind::Uniform),
            };
            std::fs::create_dir_all(&out)?;
            let mut failed = 0;
            let mut reports = Vec::new();
            for fit in fit_states(&targets, &tags, kind, IpfOptions { max_iter, tol }) {
                if let Some(w) = &fit.warning {
                    tracing::warn!("{w}");
                }
                match fit.result {
                    Ok(table) => {
                        println!(
                            "{}: {} sweeps, converged={}, {} cells over {:.0}% gap",
                            fit.state,
                            table.iterations,
                            table.converged,
                            table.gaps.as_ref().map_or(0, |g| g.over_threshold().count()),
                            DEFAULT_GAP_THRESHOLD * 100.0
                        );
                        if let Some(g) = &table.gaps {
                            reports.push(g.clone());
                        }
                        write_json(&out.join(format!("{}.json", fit.state)), &table)?;
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", fit.state);
                    }
                }
            }
            let combined = GapReport::combine(&reports, DEFAULT_GAP_THRESHOLD);
            write_json(&out.join("gaps.json"), &combined)?;
            if failed > 0 {
                bail!("{failed} state(s) failed to fit");
            }
        }
        Command::Sample { joint, pool, census, fraction, seed, out, random } => {
            let users: Vec<TaggedUser> = read_jsonl(&pool)?;
            let census = load_census(&census)?;
            let index = PoolIndex::new(&users);
            std::fs::create_dir_all(&out)?;
            for path in files_with_ext(&joint, "json")? {
                if path.file_stem().is_some_and(|s| s == "gaps") {
                    continue;
                }
                let table: JointTable = read_json(&path)?;
                let population = *census
                    .get(&table.state)
                    .with_context(|| format!("no census population for {}", table.state))?;
                let plan = build_plan(&table, population, fraction, seed)?;
                let profiles: Vec<VoterProfile> = if random {
                    draw_random(&users, &table.state, plan.total_sample_size, seed)
                } else {
                    draw(&plan, &index)?
                };
                println!("{}: {} personas", table.state, profiles.len());
                write_jsonl(&out.join(format!("{}.jsonl", table.state)), &profiles)?;
            }
        }
        Command::Simulate { mode, sample, questionnaire, prompt_config, backend, seed, respondents, out } => {
            let q = load_questionnaire(&questionnaire)?;
            let cfg: PromptConfig = match &prompt_config {
                Some(p) => read_json(p)?,
                None => PromptConfig::default(),
            };
            let client = single_backend(&backend)?;
            let output = match mode {
                Mode::Voter => {
                    let path = if sample.is_dir() { sample.join("respondents.jsonl") } else { sample };
                    let all: Vec<RespondentRecord> = read_jsonl(&path)?;
                    let chosen = select_respondents(&all, respondents, seed);
                    run_voter_wise(&chosen, &q, &cfg, &client, seed).await.map_err(anyhow::Error::msg)?
                }
                Mode::State => {
                    let mut samples = BTreeMap::new();
                    for path in files_with_ext(&sample, "jsonl")? {
                        let profiles: Vec<VoterProfile> = read_jsonl(&path)?;
                        let state = path.file_stem().expect("file has a stem").to_string_lossy().to_string();
                        samples.insert(state, profiles);
                    }
                    if samples.is_empty() {
                        bail!("no sample files in {}", sample.display());
                    }
                    run_state_wise(&samples, &q, &cfg, &client, seed).await.map_err(anyhow::Error::msg)?
                }
            };
            write_run(&out, &output)?;
            let c = output.manifest.counts;
            println!(
                "run {}: issued {}, answered {} ({} refusals), unparseable {}, aborted {}",
                output.manifest.run_id, c.issued, c.answered, c.refused, c.unparseable, c.aborted
            );
            for t in &output.states {
                match t.dem_share {
                    Some(d) => println!("  {}: dem {d:.3} winner {:?}", t.state, t.winner),
                    None => println!("  {}: no valid votes", t.state),
                }
            }
        }
        Command::Evaluate { run, gold, actual, out, divergence } => {
            let output = read_run(&run)?;
            let gold: Option<Vec<RespondentRecord>> = gold.map(|g| read_jsonl(&g)).transpose()?;
            let actual = actual.map(|a| load_actual(&a)).transpose()?;
            let kind = match divergence {
                Divergence::SymmetrizedKl => DivergenceKind::SymmetrizedKl,
                Divergence::JensenShannon => DivergenceKind::JensenShannon,
            };
            let report = evaluate(&output, gold.as_deref(), actual.as_deref(), kind);
            write_report(&out, &report)?;
            if let Some(f) = &report.f1 {
                println!("micro-F1 {:.2}  macro-F1 {:.2}  over {} questions", f.micro, f.macro_, f.scored_questions);
            }
            if let (Some(cer), Some(cvs)) = (report.cer, report.cvs) {
                println!("CER {cer:.3}  CVS {cvs:.4}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Serve { runs, backend, port, host, crosstab_cap } => {
            let registry = RunRegistry::load_dir(&runs)?;
            println!("loaded {} run(s) from {}", registry.len(), runs.display());
            let client = backend.as_deref().map(single_backend).transpose()?;
            let mut state = AppState::new(registry, client);
            state.crosstab_cap = crosstab_cap;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host/port")?;
            electsim_service::serve(addr, state).await?;
        }
        Command::Demo { out, seed } => write_demo(&out, seed)?,
    }
    Ok(())
}

fn write_demo(out: &Path, seed: u64) -> Result<()> {
    const STATES: [&str; 3] = ["Michigan", "Ohio", "Pennsylvania"];
    std::fs::create_dir_all(out.join("marginals"))?;
    let pool = synthetic::pool(2000, seed);
    let raw: Vec<RawPost> = pool
        .iter()
        .flat_map(|u| {
            u.user.posts.iter().map(|p| RawPost {
                user_id: u.user.user_id.clone(),
                user_at_name: u.user.handle.clone(),
                tweet_id: p.tweet_id.clone(),
                tweet_content: p.text.clone(),
                pub_time: p.pub_time.to_rfc3339(),
                lang: p.lang.clone(),
            })
        })
        .collect();
    write_jsonl(&out.join("posts.jsonl"), &raw)?;
    write_jsonl(&out.join("pool_tagged.jsonl"), &pool)?;

    let mut rows = String::from("state,attribute,category,mass\n");
    for (state, m) in synthetic::marginals(&STATES, seed) {
        for (attr, targets) in Attribute::ALL.iter().zip(&m.targets) {
            for (label, mass) in attr.labels().iter().zip(targets) {
                rows.push_str(&format!("{state},{},{label},{mass}\n", attr.name()));
            }
        }
    }
    std::fs::write(out.join("marginals/census.csv"), rows)?;
    std::fs::write(out.join("census.csv"), "state,population\nMichigan,500000\nOhio,500000\nPennsylvania,500000\n")?;
    std::fs::write(out.join("actual.csv"), "state,dem,rep,battleground\nMichigan,50.6,47.8,1\nOhio,45.2,53.3,1\nPennsylvania,50.0,48.8,1\n")?;

    let q = synthetic::questionnaire(5);
    write_json(&out.join("questionnaire.json"), &q)?;
    write_jsonl(&out.join("respondents.jsonl"), &synthetic::respondents(200, &q, seed))?;
    write_json(&out.join("backend.json"), &BackendConfig::mock("mock", seed))?;
    let b3 = PromptConfig {
        baseline: 3,
        temporal_cutoff: Some("2020-11-01T00:00:00Z".parse()?),
        ..PromptConfig::default()
    };
    write_json(&out.join("prompt_b3.json"), &b3)?;
    println!("wrote demo inputs to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(run(cli))
}
