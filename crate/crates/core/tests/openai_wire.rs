use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use electsim_core::engine::backend::{BackendClient, BackendConfig, BackendError, ChatMessage, RetryPolicy};
use serde_json::{json, Value};

type Seen = Arc<std::sync::Mutex<Vec<(Option<String>, Value)>>>;

#[derive(Clone)]
struct Script {
    calls: Arc<AtomicUsize>,
    /// Status codes returned before the first success.
    failures: Vec<u16>,
    seen: Seen,
}

async fn completions(State(s): State<Script>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    s.seen.lock().unwrap().push((auth, body.clone()));
    if let Some(&code) = s.failures.get(n) {
        let mut resp = (StatusCode::from_u16(code).unwrap(), "try later").into_response();
        if code == 429 {
            resp.headers_mut().insert("retry-after", "0".parse().unwrap());
        }
        return resp;
    }
    let last = body["messages"].as_array().and_then(|m| m.last()).and_then(|m| m["content"].as_str()).unwrap_or("");
    Json(json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": format!("echo: {last}")}, "finish_reason": "stop"}]
    }))
    .into_response()
}

async fn serve(failures: Vec<u16>) -> (String, Script) {
    let script = Script { calls: Arc::default(), failures, seen: Arc::default() };
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(script.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), script)
}

fn config(endpoint: String, key_env: Option<&str>) -> BackendConfig {
    BackendConfig {
        endpoint,
        model: "test-model".into(),
        mock: false,
        api_key_env: key_env.map(str::to_string),
        retry: RetryPolicy { max_attempts: 4, initial_backoff_ms: 1, max_backoff_ms: 5 },
        ..BackendConfig::mock("wire", 0)
    }
}

#[tokio::test]
async fn retries_transient_statuses_then_succeeds() {
    let (endpoint, script) = serve(vec![429, 503]).await;
    std::env::set_var("ELECTSIM_WIRE_TEST_KEY", "sk-test");
    let client = BackendClient::from_config(config(endpoint, Some("ELECTSIM_WIRE_TEST_KEY"))).unwrap();
    let outcome = client.chat(vec![ChatMessage::system("be brief"), ChatMessage::user("hello")]).await;
    assert_eq!(outcome.attempts, 3);
    assert_eq!(outcome.result.unwrap().content, "echo: hello");
    let seen = script.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let (auth, body) = &seen[2];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hello");
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let (endpoint, script) = serve(vec![400, 400]).await;
    let client = BackendClient::from_config(config(endpoint, None)).unwrap();
    let outcome = client.chat(vec![ChatMessage::user("hi")]).await;
    assert_eq!(outcome.attempts, 1);
    assert!(matches!(outcome.result, Err(BackendError::Status { status: 400, .. })));
    assert_eq!(script.calls.load(Ordering::SeqCst), 1);
    assert!(script.seen.lock().unwrap()[0].0.is_none());
}

#[tokio::test]
async fn gives_up_after_max_attempts() {
    let (endpoint, script) = serve(vec![500; 10]).await;
    let client = BackendClient::from_config(config(endpoint, None)).unwrap();
    let outcome = client.chat(vec![ChatMessage::user("hi")]).await;
    assert_eq!(outcome.attempts, 4);
    assert!(matches!(outcome.result, Err(BackendError::Status { status: 500, .. })));
    assert_eq!(script.calls.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn missing_key_variable_is_a_config_error() {
    let err = BackendClient::from_config(config("http://127.0.0.1:9".into(), Some("ELECTSIM_WIRE_UNSET_KEY"))).err();
    assert!(matches!(err, Some(BackendError::Config(_))));
}
