use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use electsim_core::engine::backend::{
    BackendClient, BackendConfig, BackendError, ChatBackend, ChatRequest, ChatResponse, RetryPolicy,
};
use electsim_core::engine::prompt::PromptConfig;
use electsim_core::engine::run::{run_state_wise, write_run};
use electsim_core::sampler::draw_random;
use electsim_core::synthetic;
use electsim_service::{router, AppState, RunRegistry};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn build_run(dir: &std::path::Path) -> String {
    let pool = synthetic::pool(300, 11);
    let mut samples = BTreeMap::new();
    samples.insert("Ohio".to_string(), draw_random(&pool, "Ohio", 40, 1));
    samples.insert("Texas".to_string(), draw_random(&pool, "Texas", 60, 1));
    let q = synthetic::questionnaire(5);
    let client = BackendClient::from_config(BackendConfig::mock("mock", 7)).unwrap();
    let run = run_state_wise(&samples, &q, &PromptConfig::default(), &client, 1).await.unwrap();
    write_run(&dir.join("run-a"), &run).unwrap();
    run.manifest.run_id
}

struct Harness {
    app: axum::Router,
    run_id: String,
    _dir: tempfile::TempDir,
}

async fn harness_with(backend: Option<BackendClient>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let run_id = build_run(dir.path()).await;
    let reg = RunRegistry::load_dir(dir.path()).unwrap();
    Harness { app: router(AppState::new(reg, backend)), run_id, _dir: dir }
}

async fn harness() -> Harness {
    harness_with(Some(BackendClient::from_config(BackendConfig::mock("mock", 7)).unwrap())).await
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

#[tokio::test]
async fn lists_and_summarizes_runs() {
    let h = harness().await;
    let (s, runs) = call(&h.app, "GET", "/runs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(runs.as_array().unwrap().len(), 1);
    assert_eq!(runs[0]["run_id"], h.run_id);
    let (s, sum) = call(&h.app, "GET", &format!("/runs/{}/summary", h.run_id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sum["question_count"], 5);
    assert_eq!(sum["population"], 100);
    assert_eq!(sum["states"].as_array().unwrap().len(), 2);
    let (s, _) = call(&h.app, "GET", "/runs/nope/summary", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn filters_are_conjunctive_and_monotone() {
    let h = harness().await;
    let url = format!("/runs/{}/filter", h.run_id);
    let (s, all) = call(&h.app, "POST", &url, Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(all["size"], 100);
    assert_eq!(all["per_state"]["Ohio"], 40);

    let (_, ohio) = call(&h.app, "POST", &url, Some(json!({"state": "Ohio"}))).await;
    assert_eq!(ohio["size"], all["per_state"]["Ohio"]);

    let dem = json!({"conditions": [{"question_id": "vote2020", "option": "A"}]});
    let (_, d) = call(&h.app, "POST", &url, Some(dem)).await;
    assert!(d["size"].as_u64().unwrap() > 0);
    assert_eq!(d["support"]["democrat"], 1.0);

    let contradiction = json!({"conditions": [
        {"question_id": "vote2020", "option": "A"},
        {"question_id": "vote2020", "option": "B"}
    ]});
    let (_, c) = call(&h.app, "POST", &url, Some(contradiction)).await;
    assert_eq!(c["size"], 0);

    let mut conditions = Vec::new();
    let mut last = all["size"].as_u64().unwrap();
    for (q, o) in [("vote2020", "B"), ("q1", "A"), ("q2", "B"), ("q3", "C")] {
        conditions.push(json!({"question_id": q, "option": o}));
        let (_, r) = call(&h.app, "POST", &url, Some(json!({ "conditions": conditions }))).await;
        let size = r["size"].as_u64().unwrap();
        assert!(size <= last);
        last = size;
    }

    let bad = json!({"conditions": [{"question_id": "q1", "option": "Z"}]});
    let (s, e) = call(&h.app, "POST", &url, Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["path"], "conditions[0].option");
}

#[tokio::test]
async fn distributions_per_state() {
    let h = harness().await;
    let base = format!("/runs/{}/questions/q1/distribution", h.run_id);
    let (s, rel) = call(&h.app, "GET", &format!("{base}?mode=relative"), None).await;
    assert_eq!(s, StatusCode::OK);
    for st in rel["states"].as_array().unwrap() {
        let sum: f64 = st["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(st["modal"].is_string());
    }
    let (_, abs) = call(&h.app, "GET", &format!("{base}?mode=absolute&state=Ohio"), None).await;
    let states = abs["states"].as_array().unwrap();
    assert_eq!(states.len(), 1);
    let total: f64 = states[0]["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert_eq!(total, states[0]["total"].as_f64().unwrap());

    let (_, empty) = call(&h.app, "GET", &format!("{base}?where=vote2020:A,vote2020:B"), None).await;
    assert!(empty["states"].as_array().unwrap().is_empty());
    let (s, _) = call(&h.app, "GET", &format!("/runs/{}/questions/nope/distribution", h.run_id), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&h.app, "GET", &format!("{base}?mode=weird"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn voter_cards_clamp_and_repeat() {
    let h = harness().await;
    let url = format!("/runs/{}/individuals/sample", h.run_id);
    let req = json!({"filter": {"state": "Ohio"}, "n": 100, "seed": 4});
    let (s, a) = call(&h.app, "POST", &url, Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a.as_array().unwrap().len(), 40);
    let (_, b) = call(&h.app, "POST", &url, Some(req)).await;
    assert_eq!(a, b);
    let card = &a[0];
    assert!(card["tags"]["gender"].is_string());
    assert!(card["tags"]["age"].is_string());
    assert!(!card["sample_posts"].as_array().unwrap().is_empty());
    let (_, few) = call(&h.app, "POST", &url, Some(json!({"n": 5, "seed": 1}))).await;
    assert_eq!(few.as_array().unwrap().len(), 5);
    let (s, _) = call(&h.app, "POST", &url, Some(json!({"n": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn crosstab_counts_cover_population() {
    let h = harness().await;
    let (s, x) = call(&h.app, "GET", &format!("/runs/{}/crosstab?dims=vote2020,q1", h.run_id), None).await;
    assert_eq!(s, StatusCode::OK);
    let total: u64 = x["cells"].as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
    assert_eq!(total, 100);
    assert_eq!(x["sampled"], 100);
    let (s, _) = call(&h.app, "GET", &format!("/runs/{}/crosstab?dims=vote2020,q1,q2,q3,q4", h.run_id), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

async fn open(app: &axum::Router, run_id: &str, voter: &Value) -> String {
    let (s, session) = call(
        app,
        "POST",
        "/chat/sessions",
        Some(json!({"run_id": run_id, "voter_id": voter["voter_id"], "state": voter["state"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    session["session_id"].as_str().unwrap().to_string()
}

async fn cards(h: &Harness) -> Value {
    let (_, cards) =
        call(&h.app, "POST", &format!("/runs/{}/individuals/sample", h.run_id), Some(json!({"n": 2, "seed": 0}))).await;
    cards
}

#[tokio::test]
async fn chat_round_trip_with_mock() {
    let h = harness().await;
    let cards = cards(&h).await;
    let sid = open(&h.app, &h.run_id, &cards[0]).await;
    let url = format!("/chat/sessions/{sid}/messages");
    let (s, r) = call(&h.app, "POST", &url, Some(json!({"text": "Who did you vote for?"}))).await;
    assert_eq!(s, StatusCode::OK);
    let party = cards[0]["tags"]["partisanship"].as_str().unwrap();
    assert!(r["reply"].as_str().unwrap().contains(party));
    assert_eq!(r["history"].as_array().unwrap().len(), 2);
    let (_, r) = call(&h.app, "POST", &url, Some(json!({"text": "Why?"}))).await;
    assert_eq!(r["history"].as_array().unwrap().len(), 4);

    let other = open(&h.app, &h.run_id, &cards[1]).await;
    let (_, session) = call(&h.app, "GET", &format!("/chat/sessions/{other}"), None).await;
    assert!(session["history"].as_array().unwrap().is_empty());
    assert!(session["preamble"].as_str().unwrap().contains("historical comments"));

    let (s, _) = call(&h.app, "POST", "/chat/sessions", Some(json!({"run_id": h.run_id, "voter_id": "ghost"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

/// Records how many messages each request carried.
struct Counting(Arc<Mutex<Vec<usize>>>);

#[async_trait]
impl ChatBackend for Counting {
    fn id(&self) -> &str {
        "counting"
    }
    async fn complete(&self, r: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.0.lock().unwrap().push(r.messages.len());
        Ok(ChatResponse { content: format!("reply {}", r.messages.len()), latency_ms: 0 })
    }
}

struct Down;

#[async_trait]
impl ChatBackend for Down {
    fn id(&self) -> &str {
        "down"
    }
    async fn complete(&self, _r: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Err(BackendError::Status { status: 500, body: "boom".into() })
    }
}

#[tokio::test]
async fn second_round_sees_first_answer() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let client = BackendClient::new(Arc::new(Counting(seen.clone())), BackendConfig::mock("counting", 0));
    let h = harness_with(Some(client)).await;
    let cards = cards(&h).await;
    let sid = open(&h.app, &h.run_id, &cards[0]).await;
    let url = format!("/chat/sessions/{sid}/messages");
    call(&h.app, "POST", &url, Some(json!({"text": "Who did you vote for?"}))).await;
    call(&h.app, "POST", &url, Some(json!({"text": "It is now 2024. Who will you vote for now?"}))).await;
    // system + user, then system + user + agent + user
    assert_eq!(*seen.lock().unwrap(), vec![2, 4]);
}

#[tokio::test]
async fn backend_failure_leaves_history_unchanged() {
    let mut cfg = BackendConfig::mock("down", 0);
    cfg.retry = RetryPolicy { max_attempts: 1, initial_backoff_ms: 1, max_backoff_ms: 1 };
    let h = harness_with(Some(BackendClient::new(Arc::new(Down), cfg))).await;
    let cards = cards(&h).await;
    let sid = open(&h.app, &h.run_id, &cards[0]).await;
    let (s, _) = call(&h.app, "POST", &format!("/chat/sessions/{sid}/messages"), Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    let (_, session) = call(&h.app, "GET", &format!("/chat/sessions/{sid}"), None).await;
    assert!(session["history"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn chat_without_backend_is_unavailable() {
    let h = harness_with(None).await;
    let cards = cards(&h).await;
    let sid = open(&h.app, &h.run_id, &cards[0]).await;
    let (s, _) = call(&h.app, "POST", &format!("/chat/sessions/{sid}/messages"), Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}
