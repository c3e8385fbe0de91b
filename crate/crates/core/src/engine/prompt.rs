//! Persona prompt rendering for the polling protocols and their ablations.

use std::collections::BTreeMap;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::backend::{BackendClient, BackendError, ChatMessage};
use super::parse::extract_json_object;
use crate::corpus::Post;
use crate::questionnaire::{Question, RespondentRecord};
use crate::sampler::VoterProfile;
use crate::seed::sha256_hex;
use crate::taxonomy::Attribute;

pub const TIME_FRAMING: &str =
    "It's 2020, and you're being surveyed for the 2020 American National Election Studies.";

const ROLE: &str = "You are a real person living in {state} with the following personal information. Please answer the following question as best as you can. You should act consistently with the role you are playing. Do not select the option to refuse to answer.";

const HISTORY_HEADER: &str = "Some of your historical comments on social media platforms:";

pub const CANDIDATES_2020: &str = "In the 2020 United States presidential election, the Republican ticket is led by incumbent President Donald Trump, who is known for his assertive communication style and strict immigration policies. Trump is focusing on economic management and a tough stance on law and order, reflecting his commitment to his \"America First\" approach. His running mate is Vice President Mike Pence. On the Democratic side, former Vice President Joe Biden is the nominee, with Senator Kamala Harris from California as his running mate. Harris is the first African-American, first Asian-American, and third female vice presidential nominee on a major party ticket. Biden's campaign emphasizes unity and healing, with a focus on addressing the public health and economic impacts of the ongoing COVID-19 pandemic, civil unrest following the killing of George Floyd, the future of the Affordable Care Act, and the composition of the U.S. Supreme Court.";

const ANSWER_DIRECT: &str = "You should give your answer (you only need to answer the option letter number) in JSON format as example below:\n```json\n{\"answer\": \"xxx\"}\n```";

const ANSWER_REASON: &str = "You should give your answer (you only need to answer the option letter number) and reason in JSON format as example below:\n```json\n{\"answer\": \"xxx\", \"reason\": \"xxx\"}\n```";

const BIOGRAPHER: &str = "You are a very outstanding biographer. Now there is some information about a person. Please generate a description of his past experiences based on this information. Please return to this biography in the second person, with the sentence structure of \"You are xxx\".";

const BIOGRAPHY_ANSWER: &str = "You should give your answer and reason in JSON format as below:\n```json\n{\"answer\": \"xxx\"}\n```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaFormat {
    #[default]
    Dict,
    Biography,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerFormat {
    #[default]
    Direct,
    Reason,
}

fn yes() -> bool {
    true
}
fn baseline_default() -> u8 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(default)]
    pub persona_format: PersonaFormat,
    #[serde(default)]
    pub answer_format: AnswerFormat,
    #[serde(default = "yes")]
    pub include_time_info: bool,
    #[serde(default = "yes")]
    pub include_ideology: bool,
    #[serde(default = "yes")]
    pub include_party: bool,
    #[serde(default = "baseline_default")]
    pub baseline: u8,
    /// Posts published at or after this instant are never shown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_cutoff: Option<DateTime<Utc>>,
    /// Replaces the built-in 2020 candidate paragraph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_context: Option<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            persona_format: PersonaFormat::Dict,
            answer_format: AnswerFormat::Direct,
            include_time_info: true,
            include_ideology: true,
            include_party: true,
            baseline: baseline_default(),
            temporal_cutoff: None,
            candidate_context: None,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=3).contains(&self.baseline) {
            return Err(format!("baseline must be 1, 2 or 3, got {}", self.baseline));
        }
        if self.baseline == 3 && self.temporal_cutoff.is_none() {
            return Err("baseline 3 requires temporal_cutoff".into());
        }
        Ok(())
    }

    fn candidates(&self) -> Option<&str> {
        match (&self.candidate_context, self.baseline) {
            (Some(c), _) => Some(c),
            (None, 3) => Some(CANDIDATES_2020),
            _ => None,
        }
    }
}

/// Who is being interviewed.
#[derive(Debug, Clone, Copy)]
pub enum Persona<'a> {
    Voter(&'a VoterProfile),
    Respondent(&'a RespondentRecord),
}

impl<'a> Persona<'a> {
    pub fn id(&self) -> &'a str {
        match self {
            Persona::Voter(v) => &v.user_id,
            Persona::Respondent(r) => &r.respondent_id,
        }
    }

    pub fn state(&self) -> Option<&'a str> {
        match self {
            Persona::Voter(v) => Some(&v.state),
            Persona::Respondent(r) => r.state.as_deref(),
        }
    }

    fn posts(&self) -> &'a [Post] {
        match self {
            Persona::Voter(v) => &v.post_history,
            Persona::Respondent(_) => &[],
        }
    }

    /// `(key, value)` persona lines after applying the tag ablations.
    pub fn tag_lines(&self, cfg: &PromptConfig) -> Vec<(String, String)> {
        let keep = |ideology: bool, party: bool| !(ideology && !cfg.include_ideology || party && !cfg.include_party);
        match self {
            Persona::Voter(v) => Attribute::ALL
                .iter()
                .filter(|a| keep(**a == Attribute::Ideology, **a == Attribute::Partisanship))
                .filter_map(|a| v.tags.label(*a).map(|l| (title_case(a.name()), l.to_string())))
                .collect(),
            Persona::Respondent(r) => {
                let mut keys: Vec<&str> =
                    crate::questionnaire::RESPONDENT_TAGS.iter().copied().filter(|k| r.tags.contains_key(*k)).collect();
                let mut extra: Vec<&str> = r
                    .tags
                    .keys()
                    .map(String::as_str)
                    .filter(|k| !crate::questionnaire::RESPONDENT_TAGS.contains(k))
                    .collect();
                keys.append(&mut extra);
                keys.into_iter()
                    .filter(|k| keep(k.eq_ignore_ascii_case("ideology"), k.eq_ignore_ascii_case("party")))
                    .map(|k| (k.to_string(), r.tags[k].clone()))
                    .collect()
            }
        }
    }
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    TimeFraming,
    Role,
    History,
    PersonalHeader,
    Tag(String),
    Biography,
    Candidates,
    Question,
    Options,
    AnswerInstruction,
}

/// A prompt as an ordered list of sections; the text is their
/// newline-joined concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub sections: Vec<(Section, String)>,
    pub history_posts: usize,
    pub flags: Vec<String>,
}

impl RenderedPrompt {
    pub fn text(&self) -> String {
        self.sections.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn section(&self, kind: &Section) -> Option<&str> {
        self.sections.iter().find(|(k, _)| k == kind).map(|(_, s)| s.as_str())
    }

    pub fn has(&self, kind: &Section) -> bool {
        self.section(kind).is_some()
    }
}

fn history_line(p: &Post) -> String {
    format!("- [{}] {}", p.pub_time.format("%Y-%m-%d"), p.text.replace('\n', " "))
}

/// Renders the polling prompt. `biography` replaces the tag lines when the
/// config asks for biography personas; `None` falls back to dict lines.
/// When `budget_chars` is set, the oldest posts are dropped until the
/// prompt fits.
pub fn render_prompt(
    persona: Persona<'_>,
    question: &Question,
    cfg: &PromptConfig,
    biography: Option<&str>,
    budget_chars: Option<usize>,
) -> RenderedPrompt {
    render_sections(persona, Some(question), cfg, biography, budget_chars)
}

/// The persona part of the prompt alone, used as a chat preamble.
pub fn render_preamble(
    persona: Persona<'_>,
    cfg: &PromptConfig,
    biography: Option<&str>,
    budget_chars: Option<usize>,
) -> RenderedPrompt {
    render_sections(persona, None, cfg, biography, budget_chars)
}

fn render_sections(
    persona: Persona<'_>,
    question: Option<&Question>,
    cfg: &PromptConfig,
    biography: Option<&str>,
    budget_chars: Option<usize>,
) -> RenderedPrompt {
    let mut flags = Vec::new();
    let state = persona.state().unwrap_or("the United States");

    let mut head = Vec::new();
    if cfg.include_time_info {
        head.push((Section::TimeFraming, TIME_FRAMING.to_string()));
    }
    head.push((Section::Role, ROLE.replace("{state}", state)));

    let mut tail = Vec::new();
    match (cfg.persona_format, biography) {
        (PersonaFormat::Biography, Some(bio)) => {
            tail.push((Section::Biography, format!("Personal information: {}", bio.trim())));
        }
        _ => {
            tail.push((Section::PersonalHeader, "Personal information:".to_string()));
            for (k, v) in persona.tag_lines(cfg) {
                tail.push((Section::Tag(k.clone()), format!("{k}: {v}")));
            }
        }
    }
    if let Some(c) = cfg.candidates() {
        tail.push((Section::Candidates, format!("Candidates Information: {c}")));
    }
    if let Some(question) = question {
        tail.push((Section::Question, format!("Question: {}", question.text)));
        let options: Vec<String> = question.options.iter().map(|o| format!("{}. {}", o.letter, o.text)).collect();
        tail.push((Section::Options, format!("Options:\n{}", options.join("\n"))));
        let answer = match cfg.answer_format {
            AnswerFormat::Direct => ANSWER_DIRECT,
            AnswerFormat::Reason => ANSWER_REASON,
        };
        tail.push((Section::AnswerInstruction, answer.to_string()));
    }

    let mut posts: Vec<&Post> = Vec::new();
    if cfg.baseline == 3 {
        posts = persona
            .posts()
            .iter()
            .filter(|p| cfg.temporal_cutoff.is_none_or(|c| p.pub_time < c))
            .collect();
        if posts.is_empty() && matches!(persona, Persona::Voter(_)) {
            flags.push(format!("empty_history:{}", persona.id()));
        }
    }

    let fixed: usize = head.iter().chain(&tail).map(|(_, s)| s.len() + 1).sum();
    let lines: Vec<String> = posts.iter().map(|p| history_line(p)).collect();
    let mut first = 0;
    if let Some(budget) = budget_chars {
        let mut len = fixed + HISTORY_HEADER.len() + 1 + lines.iter().map(|l| l.len() + 1).sum::<usize>();
        while first < lines.len() && len > budget {
            len -= lines[first].len() + 1;
            first += 1;
        }
        if first > 0 {
            flags.push(format!("history_truncated:{}", persona.id()));
        }
    }

    let mut sections = head;
    let kept = &lines[first..];
    if !kept.is_empty() {
        sections.push((Section::History, format!("{HISTORY_HEADER}\n{}", kept.join("\n"))));
    }
    sections.extend(tail);
    RenderedPrompt { sections, history_posts: kept.len(), flags }
}

pub fn render_biography_prompt(persona: Persona<'_>, cfg: &PromptConfig) -> String {
    let info: Vec<String> = persona.tag_lines(cfg).into_iter().map(|(k, v)| format!("{k}: {v}")).collect();
    format!("{BIOGRAPHER}\nPersonal information:\n{}\n{BIOGRAPHY_ANSWER}", info.join("\n"))
}

/// Biographies keyed by (backend, persona, prompt hash).
#[derive(Debug, Default)]
pub struct BiographyCache {
    entries: Mutex<BTreeMap<(String, String, String), String>>,
}

impl BiographyCache {
    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Asks the backend for a second-person biography of the persona.
pub async fn generate_biography(
    persona: Persona<'_>,
    cfg: &PromptConfig,
    client: &BackendClient,
    cache: &BiographyCache,
) -> Result<String, BackendError> {
    let prompt = render_biography_prompt(persona, cfg);
    let key = (client.backend_id().to_string(), persona.id().to_string(), sha256_hex(&prompt));
    if let Some(hit) = cache.entries.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let mut request = client.request(vec![ChatMessage::user(prompt)], None);
    request.max_tokens = request.max_tokens.max(512);
    let response = client.send(&request).await.result?;
    let bio = extract_json_object(&response.content)
        .and_then(|m| m.get("answer").and_then(|v| v.as_str()).map(str::to_string))
        .unwrap_or_else(|| response.content.trim().to_string());
    if bio.is_empty() {
        return Err(BackendError::Protocol("empty biography".into()));
    }
    cache.entries.lock().expect("cache lock").insert(key, bio.clone());
    Ok(bio)
}
