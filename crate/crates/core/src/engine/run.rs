//! Simulation run loops, state tallies and the on-disk run layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use futures::stream::{self, StreamExt};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::backend::{BackendClient, BackendConfig, ChatMessage};
use super::parse::parse_answer;
use super::prompt::{generate_biography, render_prompt, BiographyCache, Persona, PersonaFormat, PromptConfig};
use crate::corpus::{read_jsonl, write_jsonl};
use crate::questionnaire::{Party, Question, Questionnaire, RespondentRecord};
use crate::sampler::VoterProfile;
use crate::seed::{rng_for, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub voter_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    pub question_id: String,
    /// Chosen option letter; `None` when the reply could not be parsed or the call failed.
    pub answer: Option<String>,
    #[serde(default)]
    pub refusal: bool,
    pub raw: String,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub aborted: bool,
}

/// Interviews one persona on one question.
pub async fn ask(
    persona: Persona<'_>,
    question: &Question,
    cfg: &PromptConfig,
    client: &BackendClient,
    biography: Option<&str>,
) -> (ResponseRecord, Vec<String>) {
    let prompt = render_prompt(persona, question, cfg, biography, client.config().context_budget_chars);
    let outcome = client.chat(vec![ChatMessage::user(prompt.text())]).await;
    let mut record = ResponseRecord {
        voter_id: persona.id().to_string(),
        state: persona.state().map(str::to_string),
        question_id: question.id.clone(),
        answer: None,
        refusal: false,
        raw: String::new(),
        latency_ms: 0,
        attempts: outcome.attempts,
        note: None,
        aborted: false,
    };
    match outcome.result {
        Ok(resp) => {
            let parsed = parse_answer(&resp.content, question);
            record.refusal = parsed.letter.as_deref().is_some_and(|l| question.is_refusal(l));
            record.answer = parsed.letter;
            record.note = parsed.note;
            record.raw = resp.content;
            record.latency_ms = resp.latency_ms;
        }
        Err(e) => {
            record.aborted = true;
            record.note = Some(e.to_string());
        }
    }
    (record, prompt.flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Voter,
    State,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub issued: usize,
    pub answered: usize,
    /// Subset of `answered` that chose the refusal option.
    pub refused: usize,
    pub unparseable: usize,
    pub aborted: usize,
}

impl RunCounts {
    pub fn from_records(records: &[ResponseRecord]) -> Self {
        let mut c = RunCounts { issued: records.len(), ..RunCounts::default() };
        for r in records {
            if r.aborted {
                c.aborted += 1;
            } else if r.answer.is_some() {
                c.answered += 1;
                c.refused += usize::from(r.refusal);
            } else {
                c.unparseable += 1;
            }
        }
        c
    }

    pub fn reconciles(&self) -> bool {
        self.issued == self.answered + self.unparseable + self.aborted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub state: String,
    pub count: usize,
    /// SHA-256 over the sorted member ids.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: RunMode,
    pub prompt: PromptConfig,
    pub backend: BackendConfig,
    pub samples: Vec<SampleRef>,
    pub seed: u64,
    pub questionnaire_digest: String,
    pub counts: RunCounts,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Democrat,
    Republican,
    Undecided,
}

/// Vote-question tally for one state. Shares are relative to the two-party
/// total; refusals, unparseable answers and third parties are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTally {
    pub state: String,
    pub voters: usize,
    pub democrat: usize,
    pub republican: usize,
    pub other: usize,
    pub refused: usize,
    pub invalid: usize,
    pub dem_share: Option<f64>,
    pub rep_share: Option<f64>,
    pub winner: Winner,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn tally_state(state: &str, voters: usize, vote: &Question, records: &[&ResponseRecord]) -> StateTally {
    let mut t = StateTally {
        state: state.to_string(),
        voters,
        democrat: 0,
        republican: 0,
        other: 0,
        refused: 0,
        invalid: 0,
        dem_share: None,
        rep_share: None,
        winner: Winner::Undecided,
        warning: None,
    };
    for r in records.iter().filter(|r| r.question_id == vote.id) {
        match r.answer.as_deref() {
            None => t.invalid += 1,
            Some(l) if vote.is_refusal(l) => t.refused += 1,
            Some(l) => match vote.party_of(l) {
                Some(Party::Democrat) => t.democrat += 1,
                Some(Party::Republican) => t.republican += 1,
                _ => t.other += 1,
            },
        }
    }
    let two_party = t.democrat + t.republican;
    if two_party == 0 {
        t.warning = Some(format!("{state}: no valid vote answers"));
        return t;
    }
    let dem = t.democrat as f64 / two_party as f64;
    t.dem_share = Some(dem);
    t.rep_share = Some(1.0 - dem);
    t.winner = match t.democrat.cmp(&t.republican) {
        std::cmp::Ordering::Greater => Winner::Democrat,
        std::cmp::Ordering::Less => Winner::Republican,
        std::cmp::Ordering::Equal => Winner::Undecided,
    };
    t
}

/// Picks `n` respondents, fixed by seed, in input order.
pub fn select_respondents(all: &[RespondentRecord], n: usize, seed: u64) -> Vec<RespondentRecord> {
    let mut rng = rng_for(seed, "respondents");
    let mut idx = index::sample(&mut rng, all.len(), n.min(all.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

/// Everything a run writes to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub questionnaire: Questionnaire,
    pub responses: Vec<ResponseRecord>,
    pub voters: Vec<VoterProfile>,
    pub respondents: Vec<RespondentRecord>,
    pub states: Vec<StateTally>,
}

fn digest_ids<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut v: Vec<&str> = ids.collect();
    v.sort_unstable();
    sha256_hex(v.join("\n"))
}

fn run_id(mode: RunMode, prompt: &PromptConfig, backend: &BackendConfig, samples: &[SampleRef], seed: u64, qdigest: &str) -> String {
    let key = serde_json::json!({
        "mode": mode, "prompt": prompt, "backend": backend, "samples": samples, "seed": seed, "questionnaire": qdigest,
    });
    sha256_hex(key.to_string())[..16].to_string()
}

/// Runs every (persona, question) pair with bounded concurrency and returns
/// records sorted by (state, persona, question order).
async fn interview(
    personas: Vec<Persona<'_>>,
    questionnaire: &Questionnaire,
    cfg: &PromptConfig,
    client: &BackendClient,
) -> (Vec<ResponseRecord>, Vec<String>) {
    let in_flight = client.config().max_in_flight.max(1);
    let mut flags = Vec::new();

    let mut biographies: HashMap<(Option<String>, String), String> = HashMap::new();
    if cfg.persona_format == PersonaFormat::Biography {
        let cache = BiographyCache::default();
        let results: Vec<_> = stream::iter(personas.iter().copied())
            .map(|p| {
                let cache = &cache;
                async move { (p, generate_biography(p, cfg, client, cache).await) }
            })
            .buffer_unordered(in_flight)
            .collect()
            .await;
        for (p, r) in results {
            match r {
                Ok(bio) => {
                    biographies.insert((p.state().map(str::to_string), p.id().to_string()), bio);
                }
                Err(e) => flags.push(format!("biography_fallback:{}: {e}", p.id())),
            }
        }
    }

    let order: HashMap<&str, usize> = questionnaire.questions.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    let biographies = &biographies;
    let jobs = personas.iter().flat_map(|p| questionnaire.questions.iter().map(move |q| (*p, q)));
    let results: Vec<(ResponseRecord, Vec<String>)> = stream::iter(jobs)
        .map(|(p, q)| async move {
            let bio = biographies.get(&(p.state().map(str::to_string), p.id().to_string())).map(String::as_str);
            ask(p, q, cfg, client, bio).await
        })
        .buffer_unordered(in_flight)
        .collect()
        .await;

    let mut records = Vec::with_capacity(results.len());
    for (r, f) in results {
        records.push(r);
        flags.extend(f);
    }
    records.sort_by(|a, b| {
        a.state
            .cmp(&b.state)
            .then_with(|| a.voter_id.cmp(&b.voter_id))
            .then_with(|| order[a.question_id.as_str()].cmp(&order[b.question_id.as_str()]))
    });
    flags.sort();
    flags.dedup();
    (records, flags)
}

/// Voter-wise protocol: every respondent answers every question.
pub async fn run_voter_wise(
    respondents: &[RespondentRecord],
    questionnaire: &Questionnaire,
    cfg: &PromptConfig,
    client: &BackendClient,
    seed: u64,
) -> Result<RunOutput, String> {
    cfg.validate()?;
    let personas: Vec<Persona> = respondents.iter().map(Persona::Respondent).collect();
    let (responses, flags) = interview(personas, questionnaire, cfg, client).await;
    let samples = vec![SampleRef {
        state: "all".into(),
        count: respondents.len(),
        digest: digest_ids(respondents.iter().map(|r| r.respondent_id.as_str())),
    }];
    let qdigest = sha256_hex(serde_json::to_vec(questionnaire).expect("questionnaire serializes"));
    let manifest = RunManifest {
        run_id: run_id(RunMode::Voter, cfg, client.config(), &samples, seed, &qdigest),
        mode: RunMode::Voter,
        prompt: cfg.clone(),
        backend: client.config().clone(),
        samples,
        seed,
        questionnaire_digest: qdigest,
        counts: RunCounts::from_records(&responses),
        flags,
    };
    Ok(RunOutput {
        manifest,
        questionnaire: questionnaire.clone(),
        responses,
        voters: Vec::new(),
        respondents: respondents.to_vec(),
        states: Vec::new(),
    })
}

/// State-wise protocol: every sampled persona answers every question; the
/// vote question is tallied per state.
pub async fn run_state_wise(
    samples: &BTreeMap<String, Vec<VoterProfile>>,
    questionnaire: &Questionnaire,
    cfg: &PromptConfig,
    client: &BackendClient,
    seed: u64,
) -> Result<RunOutput, String> {
    cfg.validate()?;
    let vote = questionnaire.vote_question().ok_or("questionnaire has no vote question")?;
    let personas: Vec<Persona> = samples.values().flatten().map(Persona::Voter).collect();
    let (responses, mut flags) = interview(personas, questionnaire, cfg, client).await;

    let mut by_state: BTreeMap<&str, Vec<&ResponseRecord>> = BTreeMap::new();
    for r in &responses {
        by_state.entry(r.state.as_deref().unwrap_or("")).or_default().push(r);
    }
    let states: Vec<StateTally> = samples
        .iter()
        .map(|(s, voters)| tally_state(s, voters.len(), vote, by_state.get(s.as_str()).map_or(&[][..], Vec::as_slice)))
        .collect();
    for t in &states {
        if let Some(w) = &t.warning {
            tracing::warn!("{w}");
            flags.push(format!("no_valid_votes:{}", t.state));
        }
    }

    let refs: Vec<SampleRef> = samples
        .iter()
        .map(|(s, v)| SampleRef { state: s.clone(), count: v.len(), digest: digest_ids(v.iter().map(|p| p.user_id.as_str())) })
        .collect();
    let qdigest = sha256_hex(serde_json::to_vec(questionnaire).expect("questionnaire serializes"));
    let manifest = RunManifest {
        run_id: run_id(RunMode::State, cfg, client.config(), &refs, seed, &qdigest),
        mode: RunMode::State,
        prompt: cfg.clone(),
        backend: client.config().clone(),
        samples: refs,
        seed,
        questionnaire_digest: qdigest,
        counts: RunCounts::from_records(&responses),
        flags,
    };
    Ok(RunOutput {
        manifest,
        questionnaire: questionnaire.clone(),
        responses,
        voters: samples.values().flatten().cloned().collect(),
        respondents: Vec::new(),
        states,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const VOTERS_FILE: &str = "voters.jsonl";
pub const RESPONDENTS_FILE: &str = "respondents.jsonl";
pub const STATES_FILE: &str = "states.json";
pub const QUESTIONNAIRE_FILE: &str = "questionnaire.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::io::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

pub fn write_run(dir: &Path, run: &RunOutput) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(MANIFEST_FILE), &run.manifest)?;
    write_json(&dir.join(QUESTIONNAIRE_FILE), &run.questionnaire)?;
    write_jsonl(&dir.join(RESPONSES_FILE), &run.responses)?;
    match run.manifest.mode {
        RunMode::State => {
            write_jsonl(&dir.join(VOTERS_FILE), &run.voters)?;
            write_json(&dir.join(STATES_FILE), &run.states)?;
        }
        RunMode::Voter => write_jsonl(&dir.join(RESPONDENTS_FILE), &run.respondents)?,
    }
    Ok(())
}

pub fn read_run(dir: &Path) -> std::io::Result<RunOutput> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let questionnaire = read_json(&dir.join(QUESTIONNAIRE_FILE))?;
    let responses = read_jsonl(&dir.join(RESPONSES_FILE))?;
    let (voters, respondents, states) = match manifest.mode {
        RunMode::State => (read_jsonl(&dir.join(VOTERS_FILE))?, Vec::new(), read_json(&dir.join(STATES_FILE))?),
        RunMode::Voter => (Vec::new(), read_jsonl(&dir.join(RESPONDENTS_FILE))?, Vec::new()),
    };
    Ok(RunOutput { manifest, questionnaire, responses, voters, respondents, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::questionnaire::QuestionOption;

    fn vote_question() -> Question {
        let mut a = QuestionOption::new("A", "Joe Biden (Democrat)");
        a.party = Some(Party::Democrat);
        let mut b = QuestionOption::new("B", "Donald Trump (Republican)");
        b.party = Some(Party::Republican);
        let mut c = QuestionOption::new("C", "Someone else");
        c.party = Some(Party::Other);
        Question {
            id: "vote".into(),
            topic: "election".into(),
            text: "Who did you vote for?".into(),
            options: vec![a, b, c, QuestionOption::refusal("D")],
            voting_subset: true,
            likert: None,
        }
    }

    fn rec(answer: Option<&str>, q: &Question) -> ResponseRecord {
        ResponseRecord {
            voter_id: "v".into(),
            state: Some("S".into()),
            question_id: "vote".into(),
            answer: answer.map(str::to_string),
            refusal: answer.is_some_and(|a| q.is_refusal(a)),
            raw: String::new(),
            latency_ms: 0,
            attempts: 1,
            note: None,
            aborted: false,
        }
    }

    fn tally(answers: &[(&str, usize)]) -> StateTally {
        let q = vote_question();
        let recs: Vec<ResponseRecord> =
            answers.iter().flat_map(|(l, n)| std::iter::repeat_n(rec(Some(l), &q), *n)).collect();
        let refs: Vec<&ResponseRecord> = recs.iter().collect();
        tally_state("S", recs.len(), &q, &refs)
    }

    #[test]
    fn tally_examples() {
        let t = tally(&[("A", 6), ("B", 4)]);
        assert_eq!(t.dem_share, Some(0.6));
        assert_eq!(t.winner, Winner::Democrat);
        assert_eq!(tally(&[("A", 5), ("B", 5)]).winner, Winner::Undecided);
        let t = tally(&[("A", 3), ("B", 1), ("D", 6)]);
        assert_eq!(t.dem_share, Some(0.75));
        assert_eq!(t.refused, 6);
        let t = tally(&[("D", 2), ("C", 1)]);
        assert_eq!(t.winner, Winner::Undecided);
        assert!(t.warning.is_some());
        assert_eq!(t.dem_share, None);
    }

    #[test]
    fn counts_reconcile() {
        let q = vote_question();
        let mut aborted = rec(None, &q);
        aborted.aborted = true;
        let recs = vec![rec(Some("A"), &q), rec(Some("D"), &q), rec(None, &q), aborted];
        let c = RunCounts::from_records(&recs);
        assert_eq!(c, RunCounts { issued: 4, answered: 2, refused: 1, unparseable: 1, aborted: 1 });
        assert!(c.reconciles());
    }

    #[test]
    fn respondent_selection_is_seeded() {
        let all: Vec<RespondentRecord> = (0..50)
            .map(|i| RespondentRecord {
                respondent_id: format!("r{i:02}"),
                state: None,
                tags: BTreeMap::new(),
                answers: BTreeMap::new(),
            })
            .collect();
        let a = select_respondents(&all, 10, 3);
        assert_eq!(a, select_respondents(&all, 10, 3));
        assert_eq!(a.len(), 10);
        assert_ne!(a, select_respondents(&all, 10, 4));
    }

    #[tokio::test]
    async fn voter_wise_cardinality_and_order() {
        let mut q2 = vote_question();
        q2.id = "second".into();
        let qn = Questionnaire::new(vec![vote_question(), q2.clone(), { let mut q = q2; q.id = "third".into(); q }]).unwrap();
        let respondents: Vec<RespondentRecord> = ["b", "a"]
            .iter()
            .map(|id| RespondentRecord {
                respondent_id: id.to_string(),
                state: Some("Ohio".into()),
                tags: [("PARTY".to_string(), "Republican".to_string())].into_iter().collect(),
                answers: BTreeMap::new(),
            })
            .collect();
        let client = BackendClient::from_config(BackendConfig::mock("m", 0)).unwrap();
        let run = run_voter_wise(&respondents, &qn, &PromptConfig::default(), &client, 0).await.unwrap();
        assert_eq!(run.responses.len(), 6);
        let keys: Vec<_> = run.responses.iter().map(|r| (r.voter_id.as_str(), r.question_id.as_str())).collect();
        assert_eq!(
            keys,
            vec![("a", "vote"), ("a", "second"), ("a", "third"), ("b", "vote"), ("b", "second"), ("b", "third")]
        );
        assert!(run.responses.iter().all(|r| r.answer.as_deref() == Some("B")));
        assert!(run.manifest.counts.reconciles());

        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &run).unwrap();
        assert_eq!(read_run(dir.path()).unwrap(), run);
    }
}
