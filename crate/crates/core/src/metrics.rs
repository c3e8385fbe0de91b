//! Evaluation metrics and the run evaluation report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::run::{ResponseRecord, RunOutput, Winner};
use crate::questionnaire::{Question, Questionnaire, RespondentRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no states to score")]
    NoStates,
    #[error("state {0} has no simulated share")]
    UndefinedShare(String),
    #[error("distributions differ in length ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("shares sum to zero")]
    ZeroShares,
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Gold and predicted option for one respondent on one question. A `None`
/// prediction (unparseable reply) always counts as a miss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub gold: String,
    pub pred: Option<String>,
}

/// Drops pairs whose gold answer is the refusal option.
pub fn refusal_adjust(question: &Question, pairs: &[LabeledPair]) -> Vec<LabeledPair> {
    pairs.iter().filter(|p| !question.is_refusal(&p.gold)).cloned().collect()
}

/// Accuracy on one question, in [0, 1]. `None` for an empty set.
pub fn question_micro_f1(pairs: &[LabeledPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let hits = pairs.iter().filter(|p| p.pred.as_deref() == Some(p.gold.as_str())).count();
    Some(hits as f64 / pairs.len() as f64)
}

/// Unweighted mean of per-option F1 over options seen in gold or
/// prediction, in [0, 1]. `None` for an empty set.
pub fn question_macro_f1(pairs: &[LabeledPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let classes: BTreeSet<&str> =
        pairs.iter().flat_map(|p| std::iter::once(p.gold.as_str()).chain(p.pred.as_deref())).collect();
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for p in pairs {
            let pred_c = p.pred.as_deref() == Some(*c);
            let gold_c = p.gold == *c;
            match (gold_c, pred_c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Some(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Both on a 0-100 scale, averaged over scored questions.
    pub micro: f64,
    pub macro_: f64,
    pub scored_questions: usize,
    pub excluded_questions: Vec<String>,
}

/// Unweighted mean of per-question scores, ×100. Questions left with no
/// pairs after refusal adjustment are excluded.
pub fn f1_scores(per_question: &BTreeMap<String, Vec<LabeledPair>>) -> Option<F1Scores> {
    let mut micro = Vec::new();
    let mut macro_ = Vec::new();
    let mut excluded = Vec::new();
    for (qid, pairs) in per_question {
        match (question_micro_f1(pairs), question_macro_f1(pairs)) {
            (Some(mi), Some(ma)) => {
                micro.push(mi);
                macro_.push(ma);
            }
            _ => {
                tracing::warn!("question {qid} has no scorable pairs");
                excluded.push(qid.clone());
            }
        }
    }
    if micro.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    Some(F1Scores { micro: mean(&micro), macro_: mean(&macro_), scored_questions: micro.len(), excluded_questions: excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResult {
    pub state: String,
    pub dem_share: Option<f64>,
    pub rep_share: Option<f64>,
    pub winner: Winner,
    pub actual_dem_share: f64,
    pub actual_rep_share: f64,
    pub actual_winner: Winner,
    #[serde(default)]
    pub battleground: bool,
}

/// Fraction of states whose simulated winner matches; undecided never matches.
pub fn cer(results: &[StateResult]) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::NoStates);
    }
    let hits = results.iter().filter(|r| r.winner != Winner::Undecided && r.winner == r.actual_winner).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Quadratic mean across states of each state's two-candidate share RMSE.
pub fn cvs(results: &[StateResult]) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::NoStates);
    }
    let mut sum = 0.0;
    for r in results {
        let (Some(d), Some(p)) = (r.dem_share, r.rep_share) else {
            return Err(MetricError::UndefinedShare(r.state.clone()));
        };
        let state_mse = ((d - r.actual_dem_share).powi(2) + (p - r.actual_rep_share).powi(2)) / 2.0;
        sum += state_mse;
    }
    Ok((sum / results.len() as f64).sqrt())
}

fn check_distribution(p: &[f64]) -> Result<(), MetricError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(MetricError::InvalidDistribution("negative or non-finite entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(MetricError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

fn smooth(p: &[f64], epsilon: f64) -> Vec<f64> {
    let raised: Vec<f64> = p.iter().map(|x| if *x == 0.0 { epsilon } else { *x }).collect();
    let s: f64 = raised.iter().sum();
    raised.into_iter().map(|x| x / s).collect()
}

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// ½KL(P‖Q) + ½KL(Q‖P) in nats, after replacing zero entries with
/// `epsilon` and renormalizing.
pub fn js_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let (p, q) = (smooth(p, epsilon), smooth(q, epsilon));
    // KL(P‖Q) + KL(Q‖P) = Σ (p - q)(ln p - ln q); this form is exactly symmetric.
    Ok(0.5 * p.iter().zip(&q).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum::<f64>())
}

/// Jensen–Shannon divergence via the mixture M = (P+Q)/2, in nats.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::DimensionMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(a, b)| {
            let m = 0.5 * (a + b);
            0.5 * term(*a, m) + 0.5 * term(*b, m)
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// The symmetrized KL form.
    #[default]
    SymmetrizedKl,
    JensenShannon,
}

pub fn divergence(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    match kind {
        DivergenceKind::SymmetrizedKl => js_divergence(p, q, DEFAULT_EPSILON),
        DivergenceKind::JensenShannon => jensen_shannon(p, q),
    }
}

/// Herfindahl–Hirschman concentration of non-negative shares.
pub fn hhi(shares: &[f64]) -> Result<f64, MetricError> {
    if shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(MetricError::InvalidDistribution("negative or non-finite share".into()));
    }
    let total: f64 = shares.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::ZeroShares);
    }
    Ok(shares.iter().map(|s| (s / total).powi(2)).sum())
}

/// Refusals over all parsed answers, per question; questions with no
/// parsed answers are omitted.
pub fn negative_response_ratio(records: &[ResponseRecord], questionnaire: &Questionnaire) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let Some(letter) = r.answer.as_deref() else { continue };
        let Some(q) = questionnaire.question(&r.question_id) else { continue };
        let e = counts.entry(q.id.as_str()).or_default();
        e.1 += 1;
        if q.is_refusal(letter) {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(q, (neg, n))| (q.to_string(), neg as f64 / n as f64))
        .collect()
}

/// Letter counts in option order.
pub fn answer_counts<'a>(question: &Question, letters: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
    let mut counts = vec![0; question.options.len()];
    for l in letters {
        if let Some(i) = question.options.iter().position(|o| o.letter == l) {
            counts[i] += 1;
        }
    }
    counts
}

fn to_probabilities(counts: &[usize]) -> Option<Vec<f64>> {
    let n: usize = counts.iter().sum();
    (n > 0).then(|| counts.iter().map(|c| *c as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActualResult {
    pub state: String,
    pub dem_share: f64,
    pub rep_share: f64,
    pub winner: Winner,
    pub battleground: bool,
}

#[derive(Deserialize)]
struct ActualRow {
    state: String,
    dem: f64,
    rep: f64,
    #[serde(default)]
    battleground: Option<String>,
}

/// Reads `state,dem,rep[,battleground]`; `dem`/`rep` may be raw vote
/// percentages or counts and are converted to two-party shares.
pub fn load_actual(path: &Path) -> Result<Vec<ActualResult>, MetricError> {
    let io = |message: String| MetricError::Io { path: path.display().to_string(), message };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| io(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<ActualRow>() {
        let row = row.map_err(|e| io(e.to_string()))?;
        let total = row.dem + row.rep;
        if total.is_nan() || total <= 0.0 || row.dem < 0.0 || row.rep < 0.0 {
            return Err(io(format!("{}: invalid vote totals", row.state)));
        }
        let winner = match row.dem.partial_cmp(&row.rep) {
            Some(std::cmp::Ordering::Greater) => Winner::Democrat,
            Some(std::cmp::Ordering::Less) => Winner::Republican,
            _ => Winner::Undecided,
        };
        let battleground = row
            .battleground
            .as_deref()
            .is_some_and(|b| matches!(b.to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "y"));
        out.push(ActualResult { state: row.state, dem_share: row.dem / total, rep_share: row.rep / total, winner, battleground });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionReport {
    pub question_id: String,
    pub topic: String,
    pub responses: usize,
    pub scored_pairs: Option<usize>,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub hhi: Option<f64>,
    pub gold_hhi: Option<f64>,
    pub divergence: Option<f64>,
    pub negative_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub divergence_kind: DivergenceKind,
    pub f1: Option<F1Scores>,
    pub cer: Option<f64>,
    pub battleground_cer: Option<f64>,
    pub cvs: Option<f64>,
    pub questions: Vec<QuestionReport>,
    pub states: Vec<StateResult>,
    pub warnings: Vec<String>,
}

/// Scores a run. `gold` supplies respondent answers for F1 and
/// divergences (defaults to the run's own respondents); `actual` supplies
/// state results for CER and CVS.
pub fn evaluate(
    run: &RunOutput,
    gold: Option<&[RespondentRecord]>,
    actual: Option<&[ActualResult]>,
    kind: DivergenceKind,
) -> EvaluationReport {
    let mut warnings = Vec::new();
    let gold = gold.unwrap_or(&run.respondents);
    let gold_answers: BTreeMap<(&str, &str), &str> = gold
        .iter()
        .flat_map(|r| r.answers.iter().map(move |(q, a)| ((r.respondent_id.as_str(), q.as_str()), a.as_str())))
        .collect();
    let ratios = negative_response_ratio(&run.responses, &run.questionnaire);

    let mut by_question: BTreeMap<&str, Vec<&ResponseRecord>> = BTreeMap::new();
    for r in &run.responses {
        by_question.entry(r.question_id.as_str()).or_default().push(r);
    }

    let mut pair_sets: BTreeMap<String, Vec<LabeledPair>> = BTreeMap::new();
    let mut questions = Vec::new();
    for q in &run.questionnaire.questions {
        let recs = by_question.get(q.id.as_str()).map_or(&[][..], Vec::as_slice);
        let pred_counts = answer_counts(q, recs.iter().filter_map(|r| r.answer.as_deref()));
        let gold_letters: Vec<&str> = gold
            .iter()
            .filter_map(|g| gold_answers.get(&(g.respondent_id.as_str(), q.id.as_str())).copied())
            .collect();
        let gold_counts = answer_counts(q, gold_letters.iter().copied());

        let pairs: Vec<LabeledPair> = recs
            .iter()
            .filter_map(|r| {
                gold_answers
                    .get(&(r.voter_id.as_str(), q.id.as_str()))
                    .map(|g| LabeledPair { gold: g.to_string(), pred: r.answer.clone() })
            })
            .collect();
        let adjusted = (!pairs.is_empty()).then(|| refusal_adjust(q, &pairs));

        let pred_p = to_probabilities(&pred_counts);
        let gold_p = to_probabilities(&gold_counts);
        let div = match (&pred_p, &gold_p) {
            (Some(p), Some(g)) => match divergence(kind, p, g) {
                Ok(v) => Some(v),
                Err(e) => {
                    warnings.push(format!("{}: {e}", q.id));
                    None
                }
            },
            _ => None,
        };
        let shares = |c: &[usize]| hhi(&c.iter().map(|x| *x as f64).collect::<Vec<_>>()).ok();

        questions.push(QuestionReport {
            question_id: q.id.clone(),
            topic: q.topic.clone(),
            responses: recs.len(),
            scored_pairs: adjusted.as_ref().map(Vec::len),
            micro_f1: adjusted.as_deref().and_then(question_micro_f1).map(|x| x * 100.0),
            macro_f1: adjusted.as_deref().and_then(question_macro_f1).map(|x| x * 100.0),
            hhi: shares(&pred_counts),
            gold_hhi: shares(&gold_counts),
            divergence: div,
            negative_ratio: ratios.get(&q.id).copied(),
        });
        if let Some(a) = adjusted {
            pair_sets.insert(q.id.clone(), a);
        }
    }
    let f1 = if pair_sets.is_empty() { None } else { f1_scores(&pair_sets) };
    if let Some(f) = &f1 {
        warnings.extend(f.excluded_questions.iter().map(|q| format!("{q}: no pairs left after refusal adjustment")));
    }

    let mut states = Vec::new();
    if let Some(actual) = actual {
        let by_state: BTreeMap<&str, &ActualResult> = actual.iter().map(|a| (a.state.as_str(), a)).collect();
        for t in &run.states {
            match by_state.get(t.state.as_str()) {
                Some(a) => states.push(StateResult {
                    state: t.state.clone(),
                    dem_share: t.dem_share,
                    rep_share: t.rep_share,
                    winner: t.winner,
                    actual_dem_share: a.dem_share,
                    actual_rep_share: a.rep_share,
                    actual_winner: a.winner,
                    battleground: a.battleground,
                }),
                None => warnings.push(format!("{}: no actual result", t.state)),
            }
        }
    }
    let cer_all = cer(&states).ok();
    let bg: Vec<StateResult> = states.iter().filter(|s| s.battleground).cloned().collect();
    let battleground_cer = cer(&bg).ok();
    let cvs_all = match cvs(&states) {
        Ok(v) => Some(v),
        Err(MetricError::NoStates) => None,
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };

    EvaluationReport {
        run_id: run.manifest.run_id.clone(),
        divergence_kind: kind,
        f1,
        cer: cer_all,
        battleground_cer,
        cvs: cvs_all,
        questions,
        states,
        warnings,
    }
}

/// Writes `report.json`, `questions.csv` and `states.csv`.
pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<(), MetricError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| MetricError::Io { path: p.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json, text + "\n").map_err(|e| io(&json, &e))?;

    let qpath = dir.join("questions.csv");
    let mut w = csv::Writer::from_path(&qpath).map_err(|e| io(&qpath, &e))?;
    for q in &report.questions {
        w.serialize(q).map_err(|e| io(&qpath, &e))?;
    }
    w.flush().map_err(|e| io(&qpath, &e))?;

    let spath = dir.join("states.csv");
    let mut w = csv::Writer::from_path(&spath).map_err(|e| io(&spath, &e))?;
    for s in &report.states {
        w.serialize(s).map_err(|e| io(&spath, &e))?;
    }
    w.flush().map_err(|e| io(&spath, &e))?;
    Ok(())
}
