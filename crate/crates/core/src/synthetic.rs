//! Seeded synthetic inputs for demos and tests: an instrument with a vote
//! question, a tagged pool with dated posts, state marginals and survey
//! respondents.

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use rand::Rng;

use crate::annotate::TaggedUser;
use crate::corpus::{Post, UserRecord};
use crate::distribution::MarginalSet;
use crate::questionnaire::{Party, Question, QuestionOption, Questionnaire, RespondentRecord};
use crate::seed::rng_for;
use crate::taxonomy::{joint_dims, Attribute, Tags};

const TOPICS: &[(&str, &str, [&str; 3])] = &[
    ("economy", "How would you rate the national economy these days?", ["Good", "Neither good nor bad", "Poor"]),
    ("health", "Do you favor or oppose expanding government health insurance?", ["Favor", "Neither", "Oppose"]),
    ("immigration", "Should the number of immigrants permitted to come to the US be changed?", ["Increased", "Kept the same", "Decreased"]),
    ("climate", "How much should the federal government do about rising temperatures?", ["More", "The same", "Less"]),
    ("guns", "Should gun purchase rules be made more or less difficult?", ["More difficult", "Kept the same", "Less difficult"]),
    ("trust", "How often can you trust the federal government to do what is right?", ["Most of the time", "Some of the time", "Never"]),
];

pub const VOTE_QUESTION_ID: &str = "vote2020";

pub fn vote_question() -> Question {
    let opt = |l: &str, t: &str, p: Party| QuestionOption { party: Some(p), ..QuestionOption::new(l, t) };
    Question {
        id: VOTE_QUESTION_ID.into(),
        topic: "election".into(),
        text: "Who will you vote for in the 2020 presidential election?".into(),
        options: vec![
            opt("A", "Joe Biden (Democrat)", Party::Democrat),
            opt("B", "Donald Trump (Republican)", Party::Republican),
            opt("C", "Another candidate", Party::Other),
            QuestionOption::refusal("D"),
        ],
        voting_subset: true,
        likert: None,
    }
}

/// A vote question followed by `n - 1` attitude questions (at most 7 total).
pub fn questionnaire(n: usize) -> Questionnaire {
    let mut questions = vec![vote_question()];
    for (i, (topic, text, opts)) in TOPICS.iter().take(n.saturating_sub(1)).enumerate() {
        let mut options: Vec<QuestionOption> = opts
            .iter()
            .zip(["A", "B", "C"])
            .zip([1, 0, -1])
            .map(|((t, l), pol)| QuestionOption { polarity: Some(pol), ..QuestionOption::new(l, *t) })
            .collect();
        options.push(QuestionOption::refusal("D"));
        questions.push(Question {
            id: format!("q{}", i + 1),
            topic: topic.to_string(),
            text: text.to_string(),
            options,
            voting_subset: false,
            likert: None,
        });
    }
    Questionnaire::new(questions).expect("synthetic questionnaire is valid")
}

const WORDS: &[&str] = &[
    "vote", "economy", "jobs", "taxes", "healthcare", "debate", "rally", "mail", "ballot", "policy", "family",
    "work", "school", "prices", "news", "county", "local", "weather", "game", "church", "freedom", "future",
];

fn random_tags(rng: &mut impl Rng) -> Tags {
    let dims = joint_dims();
    let cell: [usize; 5] = std::array::from_fn(|i| rng.random_range(0..dims[i]));
    Tags::from_cell(cell).expect("cell in range")
}

/// `n` fully tagged users with 6-12 posts each, dated September to December 2020.
pub fn pool(n: usize, seed: u64) -> Vec<TaggedUser> {
    let start = Utc.with_ymd_and_hms(2020, 9, 1, 0, 0, 0).single().expect("valid date");
    (0..n)
        .map(|i| {
            let id = format!("user{i:05}");
            let mut rng = rng_for(seed, &format!("pool:{id}"));
            let tags = random_tags(&mut rng);
            let posts: Vec<Post> = (0..rng.random_range(6..=12))
                .map(|k| {
                    let words: Vec<&str> = (0..rng.random_range(5..12)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
                    Post {
                        tweet_id: format!("{id}-{k}"),
                        text: words.join(" "),
                        pub_time: start + Duration::hours(rng.random_range(0..24 * 110)),
                        lang: Some("en".into()),
                    }
                })
                .collect();
            TaggedUser { user: UserRecord::new(id, format!("@u{i}"), posts), tags }
        })
        .collect()
}

/// Random positive per-attribute targets, each axis summing to one.
pub fn marginals(states: &[&str], seed: u64) -> BTreeMap<String, MarginalSet> {
    states
        .iter()
        .map(|s| {
            let mut rng = rng_for(seed, &format!("marginals:{s}"));
            let targets = Attribute::ALL
                .iter()
                .map(|a| {
                    let v: Vec<f64> = (0..a.cardinality()).map(|_| rng.random_range(0.2..1.0)).collect();
                    let total: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / total).collect()
                })
                .collect();
            (s.to_string(), MarginalSet::for_taxonomy(*s, targets))
        })
        .collect()
}

/// Survey respondents with the twelve persona tags and gold answers to `q`.
pub fn respondents(n: usize, q: &Questionnaire, seed: u64) -> Vec<RespondentRecord> {
    const VALUES: [(&str, &[&str]); 12] = [
        ("AGE", &["24", "37", "52", "68"]),
        ("GENDER", &["Male", "Female"]),
        ("RACE", &["White", "Black", "Asian", "Hispanic"]),
        ("INCOME", &["Under $30,000", "$30,000-$74,999", "$75,000 or more"]),
        ("EDUCATION", &["High school", "Some college", "Bachelor's degree", "Graduate degree"]),
        ("AREA", &["Urban", "Suburban", "Rural"]),
        ("REGION", &["Northeast", "Midwest", "South", "West"]),
        ("EMPLOYMENT", &["Employed", "Unemployed", "Retired", "Student"]),
        ("MARITAL", &["Married", "Never married", "Divorced", "Widowed"]),
        ("RELIGIOUS", &["Protestant", "Catholic", "None", "Other"]),
        ("PARTY", &["Democrat", "Republican", "Independent"]),
        ("IDEOLOGY", &["Liberal", "Moderate", "Conservative"]),
    ];
    (0..n)
        .map(|i| {
            let id = format!("R{i:04}");
            let mut rng = rng_for(seed, &format!("respondent:{id}"));
            let tags: BTreeMap<String, String> = VALUES
                .iter()
                .map(|(k, vs)| (k.to_string(), vs[rng.random_range(0..vs.len())].to_string()))
                .collect();
            let answers = q
                .questions
                .iter()
                .map(|question| {
                    let letter = if question.is_vote_question() {
                        match tags["PARTY"].as_str() {
                            "Democrat" => "A",
                            "Republican" => "B",
                            _ => ["A", "B", "D"][rng.random_range(0..3)],
                        }
                    } else {
                        ["A", "B", "C", "D"][rng.random_range(0..4)]
                    };
                    (question.id.clone(), letter.to_string())
                })
                .collect();
            RespondentRecord { respondent_id: id, state: None, tags, answers }
        })
        .collect()
}
