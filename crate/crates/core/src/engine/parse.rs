//! Lenient extraction of structured answers from model output.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::questionnaire::Question;

/// Finds the first JSON object in `raw`, whether bare, fenced or embedded in prose.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let trimmed = raw.trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(trimmed) {
        return Some(m);
    }
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(m))) = stream.next() {
            return Some(m);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub letter: Option<String>,
    pub note: Option<String>,
}

fn letter_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty() && t.len() <= 2 && t.chars().all(|c| c.is_ascii_uppercase()))
}

/// Parses an answer: a structured `{"answer": X}` first, then the first
/// standalone option-letter token. Letters outside the question's options
/// are rejected with a note.
pub fn parse_answer(raw: &str, question: &Question) -> ParsedAnswer {
    let valid = |l: &str| question.has_letter(l);
    if let Some(obj) = extract_json_object(raw) {
        let answer = obj
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("answer"))
            .and_then(|(_, v)| v.as_str().map(str::to_string));
        if let Some(answer) = answer {
            let answer = answer.trim().to_string();
            if valid(&answer) {
                return ParsedAnswer { letter: Some(answer), note: None };
            }
            let first = letter_tokens(&answer).next().map(str::to_string);
            if let Some(first) = first {
                return if valid(&first) {
                    ParsedAnswer { letter: Some(first), note: None }
                } else {
                    ParsedAnswer { letter: None, note: Some(format!("invalid letter {first:?}")) }
                };
            }
        }
    }
    if let Some(l) = letter_tokens(raw).find(|t| valid(t)) {
        return ParsedAnswer { letter: Some(l.to_string()), note: None };
    }
    match letter_tokens(raw).next() {
        Some(l) => ParsedAnswer { letter: None, note: Some(format!("invalid letter {l:?}")) },
        None => ParsedAnswer { letter: None, note: Some("unparseable response".into()) },
    }
}
