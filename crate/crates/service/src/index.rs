//! Read-only, indexed view of one simulation run.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use electsim_core::corpus::Post;
use electsim_core::engine::run::{read_run, RunCounts, RunMode, RunOutput, StateTally};
use electsim_core::engine::Persona;
use electsim_core::questionnaire::{Party, QuestionOption};
use electsim_core::seed::rng_for;
use electsim_core::taxonomy::Attribute;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Default cap on the sub-population used for crosstabs.
pub const DEFAULT_CROSSTAB_CAP: usize = 5_000;
pub const MAX_CROSSTAB_DIMS: usize = 4;
const NO_STATE: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub voter_id: String,
    pub state: String,
    pub tags: BTreeMap<String, String>,
    #[serde(skip)]
    pub posts: Vec<Post>,
    pub answers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub question_id: String,
    pub option: String,
}

/// Population filter: optional state plus a conjunction of answer conditions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(default)]
    pub state: Option<String>,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

impl FilterSpec {
    /// Parses the query form `q1:A,q2:B`.
    pub fn from_query(state: Option<String>, conditions: Option<&str>) -> Result<Self, ServiceError> {
        let mut spec = FilterSpec { state, conditions: Vec::new() };
        for (i, part) in conditions.unwrap_or("").split(',').filter(|p| !p.is_empty()).enumerate() {
            let (q, o) = part
                .split_once(':')
                .ok_or_else(|| ServiceError::invalid(format!("where[{i}]"), "expected question:option"))?;
            spec.conditions.push(Condition { question_id: q.to_string(), option: o.to_string() });
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub democrat: f64,
    pub republican: f64,
    pub voters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub size: usize,
    pub per_state: BTreeMap<String, usize>,
    pub support: Option<Support>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionMode {
    #[default]
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    pub state: String,
    pub total: usize,
    /// One value per option, in option order.
    pub values: Vec<f64>,
    pub modal: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDistribution {
    pub question_id: String,
    pub mode: DistributionMode,
    pub options: Vec<QuestionOption>,
    pub states: Vec<StateDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterCard {
    pub voter_id: String,
    pub state: String,
    pub tags: BTreeMap<String, String>,
    pub sample_posts: Vec<String>,
    pub answers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstabCell {
    pub answers: Vec<Option<String>>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crosstab {
    pub dims: Vec<String>,
    pub population: usize,
    pub sampled: usize,
    pub cells: Vec<CrosstabCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInfo {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub options: Vec<QuestionOption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: RunMode,
    pub population: usize,
    pub question_count: usize,
    pub counts: RunCounts,
    pub states: Vec<StateTally>,
    pub questions: Vec<QuestionInfo>,
}

/// Number of posts shown on a voter card.
const CARD_POSTS: usize = 3;

pub struct RunIndex {
    pub run: RunOutput,
    individuals: Vec<Individual>,
    by_key: HashMap<(String, String), usize>,
    by_state: BTreeMap<String, Vec<usize>>,
    by_answer: HashMap<(String, String), Vec<usize>>,
}

impl RunIndex {
    pub fn load(dir: &Path) -> Result<Self, ServiceError> {
        let run = read_run(dir)
            .map_err(|e| ServiceError::CorruptRun { path: dir.display().to_string(), message: e.to_string() })?;
        Ok(RunIndex::new(run))
    }

    pub fn new(run: RunOutput) -> Self {
        let mut individuals: Vec<Individual> = match run.manifest.mode {
            RunMode::State => run
                .voters
                .iter()
                .map(|v| Individual {
                    voter_id: v.user_id.clone(),
                    state: v.state.clone(),
                    tags: Attribute::ALL
                        .iter()
                        .filter_map(|a| v.tags.label(*a).map(|l| (a.name().to_string(), l.to_string())))
                        .collect(),
                    posts: v.post_history.clone(),
                    answers: BTreeMap::new(),
                })
                .collect(),
            RunMode::Voter => run
                .respondents
                .iter()
                .map(|r| Individual {
                    voter_id: r.respondent_id.clone(),
                    state: r.state.clone().unwrap_or_else(|| NO_STATE.to_string()),
                    tags: r.tags.clone(),
                    posts: Vec::new(),
                    answers: BTreeMap::new(),
                })
                .collect(),
        };
        let by_key: HashMap<(String, String), usize> =
            individuals.iter().enumerate().map(|(i, p)| ((p.state.clone(), p.voter_id.clone()), i)).collect();
        for r in &run.responses {
            let key = (r.state.clone().unwrap_or_else(|| NO_STATE.to_string()), r.voter_id.clone());
            if let (Some(&i), Some(a)) = (by_key.get(&key), &r.answer) {
                individuals[i].answers.insert(r.question_id.clone(), a.clone());
            }
        }
        let mut by_state: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_answer: HashMap<(String, String), Vec<usize>> = HashMap::new();
        for (i, p) in individuals.iter().enumerate() {
            by_state.entry(p.state.clone()).or_default().push(i);
            for (q, a) in &p.answers {
                by_answer.entry((q.clone(), a.clone())).or_default().push(i);
            }
        }
        RunIndex { run, individuals, by_key, by_state, by_answer }
    }

    pub fn run_id(&self) -> &str {
        &self.run.manifest.run_id
    }

    pub fn population(&self) -> usize {
        self.individuals.len()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            run_id: self.run_id().to_string(),
            mode: self.run.manifest.mode,
            population: self.population(),
            question_count: self.run.questionnaire.questions.len(),
            counts: self.run.manifest.counts,
            states: self.run.states.clone(),
            questions: self
                .run
                .questionnaire
                .questions
                .iter()
                .map(|q| QuestionInfo { id: q.id.clone(), topic: q.topic.clone(), text: q.text.clone(), options: q.options.clone() })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &FilterSpec) -> Result<(), ServiceError> {
        for (i, c) in spec.conditions.iter().enumerate() {
            let q = self
                .run
                .questionnaire
                .question(&c.question_id)
                .ok_or_else(|| ServiceError::invalid(format!("conditions[{i}].question_id"), format!("unknown question {:?}", c.question_id)))?;
            if !q.has_letter(&c.option) {
                return Err(ServiceError::invalid(
                    format!("conditions[{i}].option"),
                    format!("{} has no option {:?}", q.id, c.option),
                ));
            }
        }
        Ok(())
    }

    /// Indices of individuals matching `spec`, ascending.
    pub fn select(&self, spec: &FilterSpec) -> Result<Vec<usize>, ServiceError> {
        self.validate(spec)?;
        let mut current: Vec<usize> = match &spec.state {
            Some(s) => self.by_state.get(s).cloned().unwrap_or_default(),
            None => (0..self.individuals.len()).collect(),
        };
        for c in &spec.conditions {
            let posting = self
                .by_answer
                .get(&(c.question_id.clone(), c.option.clone()))
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            current = intersect(&current, posting);
        }
        Ok(current)
    }

    pub fn filter_population(&self, spec: &FilterSpec) -> Result<PopulationSummary, ServiceError> {
        let ids = self.select(spec)?;
        let mut per_state: BTreeMap<String, usize> = BTreeMap::new();
        for &i in &ids {
            *per_state.entry(self.individuals[i].state.clone()).or_default() += 1;
        }
        let support = self.run.questionnaire.vote_question().and_then(|vq| {
            let (mut dem, mut rep) = (0usize, 0usize);
            for &i in &ids {
                match self.individuals[i].answers.get(&vq.id).and_then(|a| vq.party_of(a)) {
                    Some(Party::Democrat) => dem += 1,
                    Some(Party::Republican) => rep += 1,
                    _ => {}
                }
            }
            let n = dem + rep;
            (n > 0).then(|| Support { democrat: dem as f64 / n as f64, republican: rep as f64 / n as f64, voters: n })
        });
        Ok(PopulationSummary { size: ids.len(), per_state, support })
    }

    pub fn question_distribution(
        &self,
        spec: &FilterSpec,
        question_id: &str,
        mode: DistributionMode,
    ) -> Result<QuestionDistribution, ServiceError> {
        let q = self
            .run
            .questionnaire
            .question(question_id)
            .ok_or_else(|| ServiceError::NotFound(format!("question {question_id}")))?;
        let ids = self.select(spec)?;
        let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in &ids {
            let p = &self.individuals[i];
            let Some(a) = p.answers.get(&q.id) else { continue };
            let Some(pos) = q.options.iter().position(|o| &o.letter == a) else { continue };
            counts.entry(p.state.as_str()).or_insert_with(|| vec![0; q.options.len()])[pos] += 1;
        }
        let states = counts
            .into_iter()
            .map(|(state, c)| {
                let total: usize = c.iter().sum();
                let best = c.iter().copied().max().unwrap_or(0);
                let modal = (best > 0).then(|| q.options[c.iter().position(|x| *x == best).expect("max exists")].letter.clone());
                let values = match mode {
                    DistributionMode::Absolute => c.iter().map(|x| *x as f64).collect(),
                    DistributionMode::Relative => c.iter().map(|x| *x as f64 / total as f64).collect(),
                };
                StateDistribution { state: state.to_string(), total, values, modal }
            })
            .collect();
        Ok(QuestionDistribution { question_id: q.id.clone(), mode, options: q.options.clone(), states })
    }

    /// Up to `n` cards drawn uniformly without replacement, fixed by seed.
    pub fn sample_individuals(&self, spec: &FilterSpec, n: usize, seed: u64) -> Result<Vec<VoterCard>, ServiceError> {
        if n == 0 {
            return Err(ServiceError::invalid("n", "must be at least 1"));
        }
        let ids = self.select(spec)?;
        let mut rng = rng_for(seed, "cards");
        let mut picked = index::sample(&mut rng, ids.len(), n.min(ids.len())).into_vec();
        picked.sort_unstable();
        Ok(picked
            .into_iter()
            .map(|k| {
                let p = &self.individuals[ids[k]];
                VoterCard {
                    voter_id: p.voter_id.clone(),
                    state: p.state.clone(),
                    tags: p.tags.clone(),
                    sample_posts: p.posts.iter().rev().take(CARD_POSTS).map(|x| x.text.clone()).collect(),
                    answers: p.answers.clone(),
                }
            })
            .collect())
    }

    /// Joint answer counts over up to four questions, computed on a
    /// seeded sub-sample when the population exceeds `cap`.
    pub fn crosstab(&self, spec: &FilterSpec, dims: &[String], cap: usize) -> Result<Crosstab, ServiceError> {
        if dims.is_empty() || dims.len() > MAX_CROSSTAB_DIMS {
            return Err(ServiceError::invalid("dims", format!("between 1 and {MAX_CROSSTAB_DIMS} questions required")));
        }
        for (i, d) in dims.iter().enumerate() {
            if self.run.questionnaire.question(d).is_none() {
                return Err(ServiceError::invalid(format!("dims[{i}]"), format!("unknown question {d:?}")));
            }
            if dims[..i].contains(d) {
                return Err(ServiceError::invalid(format!("dims[{i}]"), "duplicate question"));
            }
        }
        let ids = self.select(spec)?;
        let population = ids.len();
        let chosen: Vec<usize> = if population > cap.max(1) {
            let mut rng = rng_for(0, "crosstab");
            let mut k = index::sample(&mut rng, population, cap.max(1)).into_vec();
            k.sort_unstable();
            k.into_iter().map(|k| ids[k]).collect()
        } else {
            ids
        };
        let mut cells: BTreeMap<Vec<Option<String>>, usize> = BTreeMap::new();
        for &i in &chosen {
            let key = dims.iter().map(|d| self.individuals[i].answers.get(d).cloned()).collect();
            *cells.entry(key).or_default() += 1;
        }
        Ok(Crosstab {
            dims: dims.to_vec(),
            population,
            sampled: chosen.len(),
            cells: cells.into_iter().map(|(answers, count)| CrosstabCell { answers, count }).collect(),
        })
    }

    pub fn individual(&self, state: Option<&str>, voter_id: &str) -> Option<&Individual> {
        match state {
            Some(s) => self.by_key.get(&(s.to_string(), voter_id.to_string())).map(|&i| &self.individuals[i]),
            None => self.individuals.iter().find(|p| p.voter_id == voter_id),
        }
    }

    /// The engine persona behind an individual, for chat.
    pub fn persona(&self, state: Option<&str>, voter_id: &str) -> Option<Persona<'_>> {
        let p = self.individual(state, voter_id)?;
        match self.run.manifest.mode {
            RunMode::State => self.run.voters.iter().find(|v| v.user_id == p.voter_id && v.state == p.state).map(Persona::Voter),
            RunMode::Voter => self.run.respondents.iter().find(|r| r.respondent_id == p.voter_id).map(Persona::Respondent),
        }
    }
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// All runs found under a directory, keyed by run id.
#[derive(Default)]
pub struct RunRegistry {
    runs: BTreeMap<String, RunIndex>,
    pub load_errors: Vec<ServiceError>,
}

impl RunRegistry {
    /// Loads `dir` itself if it is a run, otherwise every run subdirectory.
    /// Unreadable runs are recorded in `load_errors` and skipped.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut reg = RunRegistry::default();
        let manifest = electsim_core::engine::run::MANIFEST_FILE;
        let mut candidates = Vec::new();
        if dir.join(manifest).exists() {
            candidates.push(dir.to_path_buf());
        } else {
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.join(manifest).exists() {
                    candidates.push(path);
                }
            }
            candidates.sort();
        }
        for path in candidates {
            match RunIndex::load(&path) {
                Ok(idx) => reg.insert(idx),
                Err(e) => {
                    tracing::warn!("{e}");
                    reg.load_errors.push(e);
                }
            }
        }
        Ok(reg)
    }

    pub fn insert(&mut self, idx: RunIndex) {
        self.runs.insert(idx.run_id().to_string(), idx);
    }

    pub fn get(&self, run_id: &str) -> Result<&RunIndex, ServiceError> {
        self.runs.get(run_id).ok_or_else(|| ServiceError::NotFound(format!("run {run_id}")))
    }

    pub fn list(&self) -> Vec<RunSummary> {
        self.runs.values().map(|r| RunSummary { states: Vec::new(), questions: Vec::new(), ..r.summary() }).collect()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}
