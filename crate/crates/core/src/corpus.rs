//! Corpus ingestion and the four-stage cleaning pipeline:
//! user aggregation, language filtering, post-count filtering and sampling,
//! and repeatability-based user cleaning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

pub const DEFAULT_MIN_POSTS: usize = 30;
pub const DEFAULT_SAMPLE_SIZE: usize = 30;
pub const DEFAULT_REPEAT_SAMPLE: usize = 5;
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.28;
pub const UNDETERMINED_LANG: &str = "und";

/// One source row, field names as in the raw export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPost {
    #[serde(deserialize_with = "string_or_number")]
    pub user_id: String,
    #[serde(default)]
    pub user_at_name: String,
    #[serde(deserialize_with = "string_or_number")]
    pub tweet_id: String,
    pub tweet_content: String,
    pub pub_time: String,
    #[serde(default)]
    pub lang: Option<String>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("expected string or number, got {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub tweet_id: String,
    pub text: String,
    pub pub_time: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

impl Post {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub handle: String,
    pub posts: Vec<Post>,
    pub post_count: usize,
    pub avg_words: f64,
    #[serde(default)]
    pub repeatability_score: Option<f64>,
}

impl UserRecord {
    pub fn new(user_id: impl Into<String>, handle: impl Into<String>, mut posts: Vec<Post>) -> Self {
        sort_posts(&mut posts);
        let mut u = UserRecord {
            user_id: user_id.into(),
            handle: handle.into(),
            posts,
            post_count: 0,
            avg_words: 0.0,
            repeatability_score: None,
        };
        u.refresh_stats();
        u
    }

    fn refresh_stats(&mut self) {
        self.post_count = self.posts.len();
        self.avg_words = if self.posts.is_empty() {
            0.0
        } else {
            self.posts.iter().map(Post::word_count).sum::<usize>() as f64 / self.posts.len() as f64
        };
    }
}

fn sort_posts(posts: &mut [Post]) {
    posts.sort_by(|a, b| a.pub_time.cmp(&b.pub_time).then_with(|| a.tweet_id.cmp(&b.tweet_id)));
}

/// Parses the timestamp formats seen in exports; all are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(t) = DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y") {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

/// A record that failed to parse or validate.
#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRecord {
    pub line: usize,
    pub reason: String,
}

/// Counts from the aggregation stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub input_posts: usize,
    pub malformed_records: usize,
    pub duplicate_posts: usize,
}

/// Groups posts by user. Duplicate tweet ids keep their first occurrence;
/// malformed rows are counted and skipped.
pub fn aggregate_users<I>(records: I) -> (Vec<UserRecord>, AggregateStats)
where
    I: IntoIterator<Item = Result<RawPost, MalformedRecord>>,
{
    let mut stats = AggregateStats::default();
    let mut seen = HashSet::new();
    let mut by_user: BTreeMap<String, (String, Vec<Post>)> = BTreeMap::new();
    for rec in records {
        stats.input_posts += 1;
        let raw = match rec {
            Ok(r) => r,
            Err(_) => {
                stats.malformed_records += 1;
                continue;
            }
        };
        let Some(pub_time) = parse_timestamp(&raw.pub_time) else {
            stats.malformed_records += 1;
            continue;
        };
        if raw.tweet_content.trim().is_empty() || raw.user_id.is_empty() {
            stats.malformed_records += 1;
            continue;
        }
        if !seen.insert(raw.tweet_id.clone()) {
            stats.duplicate_posts += 1;
            continue;
        }
        let entry = by_user
            .entry(raw.user_id)
            .or_insert_with(|| (raw.user_at_name.clone(), Vec::new()));
        entry.1.push(Post {
            tweet_id: raw.tweet_id,
            text: raw.tweet_content,
            pub_time,
            lang: raw.lang.filter(|l| !l.trim().is_empty()),
        });
    }
    let users = by_user
        .into_iter()
        .map(|(id, (handle, posts))| UserRecord::new(id, handle, posts))
        .collect();
    (users, stats)
}

/// Assigns a language to a post that carries none.
pub trait LanguageDetector: Send + Sync {
    fn detect(&self, text: &str) -> Option<String>;
}

/// Never detects anything; unlabeled posts end up as `und`.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoDetector;

impl LanguageDetector for NoDetector {
    fn detect(&self, _text: &str) -> Option<String> {
        None
    }
}

/// Labels a post `en` when enough common English function words appear.
#[derive(Debug, Clone, Copy)]
pub struct EnglishStopwordDetector {
    pub min_hits: usize,
}

impl Default for EnglishStopwordDetector {
    fn default() -> Self {
        EnglishStopwordDetector { min_hits: 2 }
    }
}

const ENGLISH_STOPWORDS: &[&str] = &[
    "the", "and", "is", "are", "was", "to", "of", "in", "that", "it", "for", "on", "with", "this",
    "you", "not", "be", "have", "but", "they", "we", "at", "my", "just", "will",
];

impl LanguageDetector for EnglishStopwordDetector {
    fn detect(&self, text: &str) -> Option<String> {
        let hits = word_set(text).iter().filter(|w| ENGLISH_STOPWORDS.contains(&w.as_str())).count();
        (hits >= self.min_hits).then(|| "en".to_string())
    }
}

/// Keeps posts in `keep_lang`; users left with no posts are dropped.
/// The post's own `lang` field wins over the detector.
pub fn filter_language(
    users: Vec<UserRecord>,
    keep_lang: &str,
    detector: &dyn LanguageDetector,
) -> Vec<UserRecord> {
    let keep = keep_lang.trim().to_ascii_lowercase();
    users
        .into_iter()
        .filter_map(|mut u| {
            u.posts.retain_mut(|p| {
                let lang = p
                    .lang
                    .clone()
                    .or_else(|| detector.detect(&p.text))
                    .unwrap_or_else(|| UNDETERMINED_LANG.to_string());
                let lang = lang.trim().to_ascii_lowercase();
                p.lang = Some(lang.clone());
                lang == keep
            });
            u.refresh_stats();
            (u.post_count > 0).then_some(u)
        })
        .collect()
}

/// Retains users with strictly more than `min_posts` posts and replaces each
/// history with a seeded uniform sample of `sample_size` posts.
pub fn filter_by_post_count(
    users: Vec<UserRecord>,
    min_posts: usize,
    sample_size: usize,
    seed: u64,
) -> Vec<UserRecord> {
    assert!(sample_size >= 1 && min_posts >= sample_size, "need min_posts >= sample_size >= 1");
    users
        .into_iter()
        .filter(|u| u.post_count > min_posts)
        .map(|mut u| {
            let mut rng = rng_for(seed, &format!("posts:{}", u.user_id));
            let mut picked = index::sample(&mut rng, u.posts.len(), sample_size).into_vec();
            picked.sort_unstable();
            let mut posts: Vec<Post> = picked.into_iter().map(|i| u.posts[i].clone()).collect();
            sort_posts(&mut posts);
            u.posts = posts;
            u.refresh_stats();
            u
        })
        .collect()
}

/// Lowercased set of unique words, split on runs of non-alphanumeric chars.
pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard similarity of the word sets of two texts. Two empty sets count as identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    set_jaccard(&word_set(a), &word_set(b))
}

fn set_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Mean pairwise Jaccard similarity over a seeded sample of `n_sample` posts,
/// normalized by `n_sample²` over the ordered off-diagonal pairs.
///
/// Returns `None` if the user has fewer than `n_sample` posts.
pub fn repeatability_score(user: &UserRecord, n_sample: usize, seed: u64) -> Option<f64> {
    if n_sample == 0 || user.posts.len() < n_sample {
        return None;
    }
    let mut rng = rng_for(seed, &format!("repeat:{}", user.user_id));
    let mut picked = index::sample(&mut rng, user.posts.len(), n_sample).into_vec();
    picked.sort_unstable();
    let sets: Vec<_> = picked.iter().map(|&i| word_set(&user.posts[i].text)).collect();
    let mut total = 0.0;
    for (i, a) in sets.iter().enumerate() {
        for (j, b) in sets.iter().enumerate() {
            if i != j {
                total += set_jaccard(a, b);
            }
        }
    }
    Some(total / (n_sample * n_sample) as f64)
}

/// Fixed-edge histogram; bin `i` covers `[edges[i], edges[i+1])`, the last bin is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Self {
        let counts = vec![0; edges.len()];
        Histogram { edges, counts }
    }

    pub fn add(&mut self, v: f64) {
        if let Some(i) = self.edges.iter().rposition(|e| v >= *e) {
            self.counts[i] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_posts: usize,
    pub malformed_records: usize,
    pub duplicate_posts: usize,
    pub input_users: usize,
    pub users_after_language: usize,
    pub posts_after_language: usize,
    pub users_after_post_filter: usize,
    pub users_after_cleaning: usize,
    pub posts_after_cleaning: usize,
    /// Users that had too few posts for a repeatability sample (scored 0.0).
    pub insufficient_repeat_sample: usize,
    pub posts_per_user: Histogram,
    pub words_per_post: Histogram,
    pub overlap_scores: Histogram,
}

impl Default for CleaningReport {
    fn default() -> Self {
        CleaningReport {
            input_posts: 0,
            malformed_records: 0,
            duplicate_posts: 0,
            input_users: 0,
            users_after_language: 0,
            posts_after_language: 0,
            users_after_post_filter: 0,
            users_after_cleaning: 0,
            posts_after_cleaning: 0,
            insufficient_repeat_sample: 0,
            posts_per_user: Histogram::new(vec![1.0, 2.0, 5.0, 10.0, 20.0, 31.0, 50.0, 100.0, 500.0]),
            words_per_post: Histogram::new(vec![0.0, 5.0, 10.0, 20.0, 30.0, 50.0, 100.0]),
            overlap_scores: Histogram::new((0..=16).map(|i| i as f64 * 0.05).collect()),
        }
    }
}

/// Thresholds for the cleaning stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub lang: String,
    pub min_posts: usize,
    pub sample_size: usize,
    pub repeat_sample: usize,
    pub jaccard_threshold: f64,
    pub seed: u64,
    /// Number of user shards processed in parallel. Output does not depend on it.
    pub shards: usize,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            lang: "en".into(),
            min_posts: DEFAULT_MIN_POSTS,
            sample_size: DEFAULT_SAMPLE_SIZE,
            repeat_sample: DEFAULT_REPEAT_SAMPLE,
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
            seed: 0,
            shards: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Read,
    Aggregate,
    Write,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Read => "read",
            Stage::Aggregate => "aggregate",
            Stage::Write => "write",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage failed on {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} stage: {message}")]
    Invalid { stage: Stage, message: String },
}

/// Runs all cleaning stages over in-memory records.
pub fn clean_corpus<I>(
    records: I,
    cfg: &CleaningConfig,
    detector: &dyn LanguageDetector,
) -> Result<(Vec<UserRecord>, CleaningReport), PipelineError>
where
    I: IntoIterator<Item = Result<RawPost, MalformedRecord>>,
{
    if cfg.sample_size == 0 || cfg.min_posts < cfg.sample_size {
        return Err(PipelineError::Invalid {
            stage: Stage::Aggregate,
            message: format!(
                "need min_posts ({}) >= sample_size ({}) >= 1",
                cfg.min_posts, cfg.sample_size
            ),
        });
    }
    let mut report = CleaningReport::default();
    let (users, stats) = aggregate_users(records);
    report.input_posts = stats.input_posts;
    report.malformed_records = stats.malformed_records;
    report.duplicate_posts = stats.duplicate_posts;
    report.input_users = users.len();
    for u in &users {
        report.posts_per_user.add(u.post_count as f64);
        for p in &u.posts {
            report.words_per_post.add(p.word_count() as f64);
        }
    }

    let shards = cfg.shards.max(1);
    let mut buckets: Vec<Vec<UserRecord>> = (0..shards).map(|_| Vec::new()).collect();
    for u in users {
        let b = (crate::seed::derive_seed(0, &u.user_id) % shards as u64) as usize;
        buckets[b].push(u);
    }

    let results: Vec<ShardOutcome> = buckets
        .into_par_iter()
        .map(|bucket| clean_shard(bucket, cfg, detector))
        .collect();

    let mut pool = Vec::new();
    let mut scores = Vec::new();
    for r in results {
        report.users_after_language += r.after_language.0;
        report.posts_after_language += r.after_language.1;
        report.users_after_post_filter += r.after_post_filter;
        report.insufficient_repeat_sample += r.insufficient;
        scores.extend(r.scores);
        pool.extend(r.kept);
    }
    pool.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    scores.sort_by(f64::total_cmp);
    for s in scores {
        report.overlap_scores.add(s);
    }
    report.users_after_cleaning = pool.len();
    report.posts_after_cleaning = pool.iter().map(|u| u.post_count).sum();
    Ok((pool, report))
}

struct ShardOutcome {
    after_language: (usize, usize),
    after_post_filter: usize,
    insufficient: usize,
    scores: Vec<f64>,
    kept: Vec<UserRecord>,
}

fn clean_shard(users: Vec<UserRecord>, cfg: &CleaningConfig, detector: &dyn LanguageDetector) -> ShardOutcome {
    let users = filter_language(users, &cfg.lang, detector);
    let after_language = (users.len(), users.iter().map(|u| u.post_count).sum());
    let users = filter_by_post_count(users, cfg.min_posts, cfg.sample_size, cfg.seed);
    let after_post_filter = users.len();
    let mut insufficient = 0;
    let mut scores = Vec::with_capacity(users.len());
    let kept = users
        .into_iter()
        .filter_map(|mut u| {
            let score = repeatability_score(&u, cfg.repeat_sample, cfg.seed).unwrap_or_else(|| {
                insufficient += 1;
                0.0
            });
            scores.push(score);
            u.repeatability_score = Some(score);
            (score <= cfg.jaccard_threshold).then_some(u)
        })
        .collect();
    ShardOutcome { after_language, after_post_filter, insufficient, scores, kept }
}

/// Reads JSON Lines of [`RawPost`]; unparseable lines come back as errors.
pub fn read_posts(path: &Path) -> Result<Vec<Result<RawPost, MalformedRecord>>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::Io {
        stage: Stage::Read,
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            stage: Stage::Read,
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str::<RawPost>(&line)
                .map_err(|e| MalformedRecord { line: i + 1, reason: e.to_string() }),
        );
    }
    Ok(out)
}

/// Writes any serializable rows as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads JSON Lines into typed rows.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(row);
    }
    Ok(out)
}

/// File-level pipeline settings.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub report: Option<PathBuf>,
    pub cleaning: CleaningConfig,
}

/// Reads the corpus, cleans it, writes the pool and optionally the report.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    detector: &dyn LanguageDetector,
) -> Result<(Vec<UserRecord>, CleaningReport), PipelineError> {
    let records = read_posts(&cfg.input)?;
    let (pool, report) = clean_corpus(records, &cfg.cleaning, detector)?;
    write_jsonl(&cfg.output, &pool).map_err(|source| PipelineError::Io {
        stage: Stage::Write,
        path: cfg.output.clone(),
        source,
    })?;
    if let Some(path) = &cfg.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|source| PipelineError::Io {
            stage: Stage::Report,
            path: path.clone(),
            source,
        })?;
    }
    Ok((pool, report))
}
