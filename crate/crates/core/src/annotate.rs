//! Demographic annotation of pool users through chat backends, majority
//! voting across backends, and consistency scoring against a gold set.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::UserRecord;
use crate::engine::backend::{BackendClient, ChatMessage};
use crate::engine::parse::extract_json_object;
use crate::seed::sha256_hex;
use crate::taxonomy::{AgeGroup, Attribute, Category, Gender, Ideology, Partisanship, Race, Tags};

/// A pool user with (possibly partial) demographic tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedUser {
    #[serde(flatten)]
    pub user: UserRecord,
    pub tags: Tags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub user_id: String,
    pub tags: Tags,
    pub backend_id: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub user_id: String,
    /// Null entries mean the label could not be established.
    pub tags: Tags,
}

const ANNOTATION_TEMPLATE: &str = "You are a professional annotator tasked with evaluating the attributes of a person based on their entire history of speeches. Your role is to assess the person holistically, taking into account all the provided speeches together, rather than evaluating each speech individually. Below is some historical speech information about this person:

Text:{text}

Now, please classify the following attributes of the person:

1. Age Group
   A. Youth (18-35 years old)
   B. Middle-aged (36-65 years old)
   C. Elderly (over 65 years old)
2. Gender
   A. Male
   B. Female
3. Race
   A. White
   B. Black
   C. Asian
   D. Hispanic
4. Party Affiliation
   A. Democratic Party
   B. Republican Party
   C. Other Party
   D. Independent
5. Ideology
   A. Liberal
   B. Moderate
   C. Conservative

Please provide your answers in the following JSON format for each attribute:
```json
{
\"AGE\": \"A\",
\"GENDER\": \"B\",
\"RACE\": \"C\",
\"PARTY\": \"B\",
\"IDEOLOGY\": \"C\"
}
```";

/// Annotation runs at temperature zero.
pub const ANNOTATION_TEMPERATURE: f64 = 0.0;

pub fn render_annotation_prompt(user: &UserRecord) -> String {
    let text: Vec<&str> = user.posts.iter().map(|p| p.text.as_str()).collect();
    ANNOTATION_TEMPLATE.replace("{text}", &text.join("\n"))
}

/// Option letter to taxonomy category, per the prompt's lists.
fn letter_label(attr: Attribute, letter: char) -> Option<Tags> {
    let mut t = Tags::default();
    let i = (letter.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
    match attr {
        Attribute::Age => t.age = Some(AgeGroup::from_index(i)?),
        Attribute::Gender => t.gender = Some(Gender::from_index(i)?),
        Attribute::Race => t.race = Some(Race::from_index(i)?),
        Attribute::Ideology => t.ideology = Some(Ideology::from_index(i)?),
        Attribute::Partisanship => {
            t.partisanship = Some(
                [Partisanship::Democrat, Partisanship::Republican, Partisanship::Others, Partisanship::Independent]
                    .get(i)
                    .copied()?,
            )
        }
    }
    Some(t)
}

fn response_key(attr: Attribute) -> &'static str {
    match attr {
        Attribute::Age => "AGE",
        Attribute::Gender => "GENDER",
        Attribute::Race => "RACE",
        Attribute::Ideology => "IDEOLOGY",
        Attribute::Partisanship => "PARTY",
    }
}

/// Parses an annotation response; unparseable or out-of-range attributes stay null.
pub fn parse_annotation(raw: &str) -> Tags {
    let mut tags = Tags::default();
    let Some(obj) = extract_json_object(raw) else { return tags };
    let upper: HashMap<String, &serde_json::Value> = obj.iter().map(|(k, v)| (k.to_ascii_uppercase(), v)).collect();
    for attr in Attribute::ALL {
        let Some(value) = upper.get(response_key(attr)).and_then(|v| v.as_str()) else { continue };
        let value = value.trim();
        let mut chars = value.chars();
        let first = chars.next();
        let single_letter = first.is_some_and(|c| c.is_ascii_alphabetic())
            && chars.next().is_none_or(|c| !c.is_alphanumeric());
        let parsed = if single_letter {
            letter_label(attr, first.expect("checked"))
        } else {
            let mut t = Tags::default();
            t.set_label(attr, value.trim_end_matches(" Party")).then_some(t)
        };
        if let Some(p) = parsed {
            merge_attr(&mut tags, &p, attr);
        }
    }
    tags
}

fn merge_attr(into: &mut Tags, from: &Tags, attr: Attribute) {
    match attr {
        Attribute::Gender => into.gender = from.gender,
        Attribute::Age => into.age = from.age,
        Attribute::Race => into.race = from.race,
        Attribute::Ideology => into.ideology = from.ideology,
        Attribute::Partisanship => into.partisanship = from.partisanship,
    }
}

/// Raw responses keyed by (backend, user, prompt hash).
#[derive(Debug, Default)]
pub struct AnnotationCache {
    entries: Mutex<BTreeMap<(String, String, String), String>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRow {
    backend_id: String,
    user_id: String,
    prompt_hash: String,
    response: String,
}

impl AnnotationCache {
    pub fn get(&self, backend: &str, user: &str, prompt_hash: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(backend.to_string(), user.to_string(), prompt_hash.to_string()))
            .cloned()
    }

    pub fn insert(&self, backend: &str, user: &str, prompt_hash: &str, response: String) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert((backend.to_string(), user.to_string(), prompt_hash.to_string()), response);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let cache = AnnotationCache::default();
        if path.exists() {
            for row in crate::corpus::read_jsonl::<CacheRow>(path)? {
                cache.insert(&row.backend_id, &row.user_id, &row.prompt_hash, row.response);
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let rows: Vec<CacheRow> = self
            .entries
            .lock()
            .expect("cache lock")
            .iter()
            .map(|((b, u, h), r)| CacheRow {
                backend_id: b.clone(),
                user_id: u.clone(),
                prompt_hash: h.clone(),
                response: r.clone(),
            })
            .collect();
        crate::corpus::write_jsonl(path, &rows)
    }
}

/// Annotates one user with one backend. Transport failures (after the
/// client's retries) yield an all-null result with an error note.
pub async fn annotate_user(user: &UserRecord, client: &BackendClient, cache: &AnnotationCache) -> AnnotationResult {
    let prompt = render_annotation_prompt(user);
    let hash = sha256_hex(&prompt);
    let backend_id = client.backend_id().to_string();
    if let Some(raw) = cache.get(&backend_id, &user.user_id, &hash) {
        return AnnotationResult { user_id: user.user_id.clone(), tags: parse_annotation(&raw), backend_id, raw_response: raw, error: None };
    }
    let request = client.request(vec![ChatMessage::user(prompt)], Some(ANNOTATION_TEMPERATURE));
    match client.send(&request).await.result {
        Ok(resp) => {
            cache.insert(&backend_id, &user.user_id, &hash, resp.content.clone());
            AnnotationResult {
                user_id: user.user_id.clone(),
                tags: parse_annotation(&resp.content),
                backend_id,
                raw_response: resp.content,
                error: None,
            }
        }
        Err(e) => AnnotationResult {
            user_id: user.user_id.clone(),
            tags: Tags::default(),
            backend_id,
            raw_response: String::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Per attribute, the strictly most frequent non-null label; ties and
/// all-null give null.
pub fn majority_vote(results: &[AnnotationResult]) -> Tags {
    let mut out = Tags::default();
    for attr in Attribute::ALL {
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for r in results {
            if let Some(l) = r.tags.label(attr) {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let leaders: Vec<_> = counts.iter().filter(|(_, &c)| c == best).collect();
        if best > 0 && leaders.len() == 1 {
            out.set_label(attr, leaders[0].0);
        }
    }
    out
}

/// Fraction of gold records with a non-null label for `attr` that the
/// prediction matches. Missing predictions count as mismatches.
/// `None` when no gold record has that attribute.
pub fn consistency_score(predictions: &BTreeMap<String, Tags>, gold: &[GoldRecord], attr: Attribute) -> Option<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for g in gold {
        let Some(want) = g.tags.label(attr) else { continue };
        n += 1;
        if predictions.get(&g.user_id).and_then(|t| t.label(attr)) == Some(want) {
            correct += 1;
        }
    }
    (n > 0).then(|| correct as f64 / n as f64)
}

/// Loads gold records, rejecting rows with no labels at all.
pub fn load_gold(path: &Path) -> std::io::Result<Vec<GoldRecord>> {
    let rows: Vec<GoldRecord> = crate::corpus::read_jsonl(path)?;
    if let Some(bad) = rows.iter().find(|g| g.tags == Tags::default()) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("gold record {} has no labels", bad.user_id),
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    #[default]
    Majority,
    /// Use the first backend only.
    First,
}

/// Annotates every user with every backend (bounded concurrency across
/// users) and combines the results with `rule`.
pub async fn annotate_pool(
    pool: &[UserRecord],
    clients: &[BackendClient],
    cache: &AnnotationCache,
    rule: VoteRule,
    max_in_flight: usize,
) -> (Vec<TaggedUser>, Vec<AnnotationResult>) {
    let per_user: Vec<(usize, Vec<AnnotationResult>)> = stream::iter(pool.iter().enumerate())
        .map(|(i, user)| async move {
            let results = futures::future::join_all(clients.iter().map(|c| annotate_user(user, c, cache))).await;
            (i, results)
        })
        .buffer_unordered(max_in_flight.max(1))
        .collect()
        .await;
    let mut per_user = per_user;
    per_user.sort_by_key(|(i, _)| *i);
    let mut tagged = Vec::with_capacity(pool.len());
    let mut all = Vec::new();
    for (i, results) in per_user {
        let tags = match rule {
            VoteRule::Majority if results.len() >= 2 => majority_vote(&results),
            _ => results.first().map(|r| r.tags).unwrap_or_default(),
        };
        tagged.push(TaggedUser { user: pool[i].clone(), tags });
        all.extend(results);
    }
    (tagged, all)
}

/// Per-attribute label counts over the pool; unknown labels are counted under `"null"`.
pub fn tag_distribution(pool: &[TaggedUser]) -> BTreeMap<Attribute, BTreeMap<String, usize>> {
    let mut out: BTreeMap<Attribute, BTreeMap<String, usize>> = BTreeMap::new();
    for u in pool {
        for attr in Attribute::ALL {
            let key = u.tags.label(attr).unwrap_or("null").to_string();
            *out.entry(attr).or_default().entry(key).or_default() += 1;
        }
    }
    out
}
