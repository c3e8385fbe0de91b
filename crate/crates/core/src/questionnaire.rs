//! Poll instrument: questions, options, the merged refusal option and
//! Likert collapsing rules.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text of the merged refusal option.
pub const REFUSAL_TEXT: &str = "DK/RF";

/// Source option texts that fold into the refusal option.
const INVALID_SOURCE_TEXTS: &[&str] = &[
    "refused",
    "refuse",
    "don't know",
    "dont know",
    "do not know",
    "haven't thought much about this",
    "havent thought much about this",
    "dk/rf",
    "dk",
    "rf",
];

/// Which side of the two-party vote an option represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Democrat,
    Republican,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOption {
    pub letter: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub refusal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub party: Option<Party>,
}

impl QuestionOption {
    pub fn new(letter: impl Into<String>, text: impl Into<String>) -> Self {
        QuestionOption {
            letter: letter.into(),
            text: text.into(),
            refusal: false,
            polarity: None,
            party: None,
        }
    }

    pub fn refusal(letter: impl Into<String>) -> Self {
        QuestionOption { refusal: true, ..QuestionOption::new(letter, REFUSAL_TEXT) }
    }

    fn is_invalid_source(&self) -> bool {
        let t = self.text.trim().to_ascii_lowercase().replace('\u{2019}', "'");
        let t = t.trim_end_matches('.');
        self.refusal || INVALID_SOURCE_TEXTS.contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub options: Vec<QuestionOption>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub voting_subset: bool,
    /// Per-question override of the 7-to-3 Likert collapse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likert: Option<LikertMap>,
}

impl Question {
    pub fn option(&self, letter: &str) -> Option<&QuestionOption> {
        self.options.iter().find(|o| o.letter == letter)
    }

    pub fn has_letter(&self, letter: &str) -> bool {
        self.option(letter).is_some()
    }

    pub fn letters(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.letter.as_str())
    }

    pub fn refusal_option(&self) -> Option<&QuestionOption> {
        self.options.iter().find(|o| o.refusal)
    }

    pub fn is_refusal(&self, letter: &str) -> bool {
        self.option(letter).is_some_and(|o| o.refusal)
    }

    pub fn substantive(&self) -> impl Iterator<Item = &QuestionOption> {
        self.options.iter().filter(|o| !o.refusal)
    }

    pub fn party_of(&self, letter: &str) -> Option<Party> {
        self.option(letter).and_then(|o| o.party)
    }

    pub fn is_vote_question(&self) -> bool {
        self.options.iter().any(|o| o.party.is_some())
    }

    fn validate(&self) -> Result<(), QuestionnaireError> {
        let mut letters = BTreeSet::new();
        for o in &self.options {
            if o.letter.trim().is_empty() || !letters.insert(o.letter.as_str()) {
                return Err(QuestionnaireError::DuplicateLetter {
                    question: self.id.clone(),
                    letter: o.letter.clone(),
                });
            }
        }
        let refusals = self.options.iter().filter(|o| o.refusal).count();
        match refusals {
            0 => return Err(QuestionnaireError::MissingRefusal(self.id.clone())),
            1 => {}
            n => return Err(QuestionnaireError::MultipleRefusals { question: self.id.clone(), count: n }),
        }
        if !self.options.last().is_some_and(|o| o.refusal) {
            return Err(QuestionnaireError::RefusalNotLast(self.id.clone()));
        }
        let substantive = self.options.len() - 1;
        if substantive < 2 {
            return Err(QuestionnaireError::TooFewOptions { question: self.id.clone(), count: substantive });
        }
        if let Some(m) = &self.likert {
            m.validate().map_err(|reason| QuestionnaireError::BadLikert {
                question: self.id.clone(),
                reason,
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireSummary {
    pub questions: usize,
    pub topics: usize,
    pub voting_subset: usize,
    pub avg_words_per_question: f64,
    pub avg_options_per_question: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub questions: Vec<Question>,
}

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error("cannot read questionnaire: {0}")]
    Io(#[from] std::io::Error),
    #[error("questionnaire is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("questionnaire has no questions")]
    Empty,
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("question {0:?} has no refusal option")]
    MissingRefusal(String),
    #[error("question {question:?} has {count} refusal options, expected one")]
    MultipleRefusals { question: String, count: usize },
    #[error("question {0:?}: refusal option must be last")]
    RefusalNotLast(String),
    #[error("question {question:?} has {count} substantive options, need at least 2")]
    TooFewOptions { question: String, count: usize },
    #[error("question {question:?}: duplicate or empty option letter {letter:?}")]
    DuplicateLetter { question: String, letter: String },
    #[error("question {question:?}: bad Likert mapping: {reason}")]
    BadLikert { question: String, reason: String },
}

impl Questionnaire {
    /// Validates and wraps a list of questions.
    pub fn new(questions: Vec<Question>) -> Result<Self, QuestionnaireError> {
        let q = Questionnaire { questions };
        q.validate()?;
        Ok(q)
    }

    pub fn from_json(text: &str) -> Result<Self, QuestionnaireError> {
        if text.trim().is_empty() {
            return Err(QuestionnaireError::Empty);
        }
        let q: Questionnaire = serde_json::from_str(text)?;
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), QuestionnaireError> {
        if self.questions.is_empty() {
            return Err(QuestionnaireError::Empty);
        }
        let mut ids = BTreeSet::new();
        for q in &self.questions {
            if !ids.insert(q.id.as_str()) {
                return Err(QuestionnaireError::DuplicateId(q.id.clone()));
            }
            q.validate()?;
        }
        Ok(())
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn voting_subset(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.voting_subset)
    }

    /// The presidential vote question: the first with party-tagged options.
    pub fn vote_question(&self) -> Option<&Question> {
        self.questions.iter().find(|q| q.is_vote_question())
    }

    pub fn topics(&self) -> BTreeSet<&str> {
        self.questions.iter().map(|q| q.topic.as_str()).collect()
    }

    pub fn summary(&self) -> QuestionnaireSummary {
        let n = self.questions.len().max(1) as f64;
        QuestionnaireSummary {
            questions: self.questions.len(),
            topics: self.topics().len(),
            voting_subset: self.voting_subset().count(),
            avg_words_per_question: self
                .questions
                .iter()
                .map(|q| q.text.split_whitespace().count())
                .sum::<usize>() as f64
                / n,
            avg_options_per_question: self.questions.iter().map(|q| q.options.len()).sum::<usize>()
                as f64
                / n,
        }
    }
}

/// Loads and validates a questionnaire file.
pub fn load_questionnaire(path: &Path) -> Result<Questionnaire, QuestionnaireError> {
    Questionnaire::from_json(&std::fs::read_to_string(path)?)
}

/// Replaces every refusal-like option by a single `DK/RF` option appended last.
///
/// Substantive options keep their letters; the refusal takes the letter after
/// the last substantive one.
pub fn merge_refusals(options: Vec<QuestionOption>) -> Vec<QuestionOption> {
    let mut out: Vec<QuestionOption> = options.into_iter().filter(|o| !o.is_invalid_source()).collect();
    let letter = out.last().map(|o| next_letter(&o.letter)).unwrap_or_else(|| "A".to_string());
    out.push(QuestionOption::refusal(letter));
    out
}

fn next_letter(letter: &str) -> String {
    let mut chars: Vec<char> = letter.chars().collect();
    match chars.last_mut() {
        Some(c) if c.is_ascii_alphabetic() && *c != 'z' && *c != 'Z' => {
            *c = (*c as u8 + 1) as char;
            chars.into_iter().collect()
        }
        _ => format!("{letter}'"),
    }
}

/// Partition of the 7-point scale into three ordered positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u8; 2]>", into = "Vec<[u8; 2]>")]
pub struct LikertMap {
    groups: [RangeInclusive<u8>; 3],
}

impl Default for LikertMap {
    fn default() -> Self {
        LikertMap { groups: [1..=3, 4..=4, 5..=7] }
    }
}

impl LikertMap {
    pub fn new(groups: [RangeInclusive<u8>; 3]) -> Result<Self, String> {
        let m = LikertMap { groups };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<(), String> {
        let mut expect = 1u8;
        for g in &self.groups {
            if *g.start() != expect || g.end() < g.start() {
                return Err(format!("groups must tile 1..=7 contiguously, got {:?}", self.groups));
            }
            expect = g.end() + 1;
        }
        if expect != 8 {
            return Err(format!("groups must end at 7, got {:?}", self.groups));
        }
        Ok(())
    }

    /// Collapsed position (1..=3) of a raw 7-point answer.
    pub fn collapse(&self, raw: u8) -> Result<u8, LikertError> {
        self.groups
            .iter()
            .position(|g| g.contains(&raw))
            .map(|i| i as u8 + 1)
            .ok_or(LikertError(raw))
    }
}

impl TryFrom<Vec<[u8; 2]>> for LikertMap {
    type Error = String;

    fn try_from(v: Vec<[u8; 2]>) -> Result<Self, String> {
        let [a, b, c]: [[u8; 2]; 3] = v.try_into().map_err(|_| "expected three groups".to_string())?;
        LikertMap::new([a[0]..=a[1], b[0]..=b[1], c[0]..=c[1]])
    }
}

impl From<LikertMap> for Vec<[u8; 2]> {
    fn from(m: LikertMap) -> Self {
        m.groups.iter().map(|g| [*g.start(), *g.end()]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("Likert answer {0} is outside 1..=7")]
pub struct LikertError(pub u8);

pub fn likert_collapse(map: &LikertMap, raw: u8) -> Result<u8, LikertError> {
    map.collapse(raw)
}

/// A survey respondent with known demographic tags and gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentRecord {
    pub respondent_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    /// Keys such as AGE, GENDER, RACE, INCOME, EDUCATION, AREA, REGION,
    /// EMPLOYMENT, MARITAL, RELIGIOUS, PARTY, IDEOLOGY.
    pub tags: BTreeMap<String, String>,
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
}

/// The twelve respondent tags used as persona information, in prompt order.
pub const RESPONDENT_TAGS: [&str; 12] = [
    "AGE", "GENDER", "RACE", "INCOME", "EDUCATION", "AREA", "REGION", "EMPLOYMENT", "MARITAL",
    "RELIGIOUS", "PARTY", "IDEOLOGY",
];

impl RespondentRecord {
    /// Checks every gold answer names a valid option of a known question.
    pub fn validate(&self, q: &Questionnaire) -> Result<(), String> {
        for (qid, letter) in &self.answers {
            let question = q
                .question(qid)
                .ok_or_else(|| format!("{}: unknown question {qid:?}", self.respondent_id))?;
            if !question.has_letter(letter) {
                return Err(format!("{}: {qid} has no option {letter:?}", self.respondent_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, n: usize) -> Question {
        let letters = ["A", "B", "C", "D", "E", "F"];
        let mut options: Vec<_> = (0..n).map(|i| QuestionOption::new(letters[i], format!("opt {i}"))).collect();
        options.push(QuestionOption::refusal(letters[n]));
        Question {
            id: id.into(),
            topic: "economy".into(),
            text: "What do you think?".into(),
            options,
            voting_subset: false,
            likert: None,
        }
    }

    #[test]
    fn valid_questionnaire_loads() {
        let qn = Questionnaire::new(vec![q("q1", 3), q("q2", 2)]).unwrap();
        let text = serde_json::to_string(&qn).unwrap();
        let back = Questionnaire::from_json(&text).unwrap();
        assert_eq!(back, qn);
        assert_eq!(back.summary().topics, 1);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Questionnaire::from_json(""), Err(QuestionnaireError::Empty)));
        assert!(matches!(
            Questionnaire::from_json(r#"{"questions": []}"#),
            Err(QuestionnaireError::Empty)
        ));
        assert!(matches!(
            Questionnaire::new(vec![q("q1", 2), q("q1", 3)]),
            Err(QuestionnaireError::DuplicateId(_))
        ));
        let mut two_refusals = q("q1", 3);
        two_refusals.options[0].refusal = true;
        assert!(matches!(
            Questionnaire::new(vec![two_refusals]),
            Err(QuestionnaireError::MultipleRefusals { count: 2, .. })
        ));
        let mut none = q("q1", 3);
        none.options.pop();
        assert!(matches!(Questionnaire::new(vec![none]), Err(QuestionnaireError::MissingRefusal(_))));
        assert!(matches!(
            Questionnaire::new(vec![q("q1", 1)]),
            Err(QuestionnaireError::TooFewOptions { count: 1, .. })
        ));
        let mut not_last = q("q1", 3);
        not_last.options.swap(0, 3);
        assert!(matches!(Questionnaire::new(vec![not_last]), Err(QuestionnaireError::RefusalNotLast(_))));
    }

    #[test]
    fn likert_defaults_and_custom() {
        let m = LikertMap::default();
        assert_eq!(m.collapse(1), Ok(1));
        assert_eq!(m.collapse(4), Ok(2));
        assert_eq!(m.collapse(7), Ok(3));
        assert_eq!(m.collapse(0), Err(LikertError(0)));
        assert_eq!(m.collapse(8), Err(LikertError(8)));
        let custom = LikertMap::new([1..=2, 3..=5, 6..=7]).unwrap();
        assert_eq!(likert_collapse(&custom, 5), Ok(2));
        assert!(LikertMap::new([1..=2, 4..=5, 6..=7]).is_err());
        let parsed: LikertMap = serde_json::from_str("[[1,2],[3,5],[6,7]]").unwrap();
        assert_eq!(parsed, custom);
        assert!(serde_json::from_str::<LikertMap>("[[1,2],[3,5]]").is_err());
    }

    #[test]
    fn intensity_levels_share_a_position() {
        // "Agree strongly" = 1, "Agree somewhat" = 2 on the 7-point agree/disagree scale
        let m = LikertMap::default();
        assert_eq!(m.collapse(1), m.collapse(2));
    }

    #[test]
    fn merge_refusals_examples() {
        let opts = vec![
            QuestionOption::new("A", "Favor"),
            QuestionOption::new("B", "Oppose"),
            QuestionOption::new("C", "Refused"),
            QuestionOption::new("D", "Don't know"),
        ];
        let merged = merge_refusals(opts);
        assert_eq!(merged.len(), 3);
        assert_eq!(merged[2], QuestionOption::refusal("C"));

        let clean = vec![QuestionOption::new("A", "Yes"), QuestionOption::new("B", "No")];
        let merged = merge_refusals(clean);
        assert_eq!(merged.last().unwrap().text, REFUSAL_TEXT);
        assert_eq!(merged.last().unwrap().letter, "C");

        assert_eq!(merge_refusals(merged.clone()), merged);

        let thought = vec![
            QuestionOption::new("A", "Yes"),
            QuestionOption::new("B", "Haven\u{2019}t thought much about this"),
            QuestionOption::new("C", "No"),
        ];
        let merged = merge_refusals(thought);
        assert_eq!(merged.iter().map(|o| o.letter.as_str()).collect::<Vec<_>>(), ["A", "C", "D"]);
    }

    #[test]
    fn respondent_answers_are_checked() {
        let qn = Questionnaire::new(vec![q("q1", 3)]).unwrap();
        let mut r = RespondentRecord {
            respondent_id: "r1".into(),
            state: None,
            tags: BTreeMap::new(),
            answers: [("q1".to_string(), "B".to_string())].into(),
        };
        assert!(r.validate(&qn).is_ok());
        r.answers.insert("q1".into(), "Z".into());
        assert!(r.validate(&qn).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn merge_is_idempotent(texts in proptest::collection::vec(
                prop_oneof!["[a-z]{3,8}", Just("Refused".to_string()), Just("Don't know".to_string())],
                0..6,
            )) {
                let letters = ["A", "B", "C", "D", "E", "F"];
                let opts: Vec<_> = texts.iter().enumerate().map(|(i, t)| QuestionOption::new(letters[i], t.clone())).collect();
                let once = merge_refusals(opts);
                prop_assert_eq!(once.iter().filter(|o| o.refusal).count(), 1);
                prop_assert!(once.last().unwrap().refusal);
                prop_assert_eq!(merge_refusals(once.clone()), once);
            }

            #[test]
            fn likert_is_monotone(a in 1u8..=7, b in 1u8..=7) {
                let m = LikertMap::default();
                if a <= b {
                    prop_assert!(m.collapse(a).unwrap() <= m.collapse(b).unwrap());
                }
            }
        }
    }
}
