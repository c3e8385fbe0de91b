//! Chat-completion backends and the rate-limited, retrying client around them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::seed::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// Wire-level request body for an OpenAI-style chat completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Stable hash of the request, used for replay fixtures and caches.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    /// Backend-reported latency; zero for in-process backends.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by backend")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no recorded response for request {0}")]
    NotRecorded(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::RateLimited { .. } => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 408,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff_ms: 500, max_backoff_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

fn default_temperature() -> f64 {
    0.5
}
fn default_max_tokens() -> u32 {
    32
}
fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Requests per second; unset means unthrottled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Rendered prompts longer than this (in chars) lose their oldest posts first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_budget_chars: Option<usize>,
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub seed: u64,
    /// Request-hash to response map; selects the replay backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

impl BackendConfig {
    pub fn mock(id: impl Into<String>, seed: u64) -> Self {
        BackendConfig {
            backend_id: id.into(),
            endpoint: String::new(),
            model: "mock".into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            api_key_env: None,
            rate_limit: None,
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
            context_budget_chars: None,
            mock: true,
            seed,
            replay: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens < 1 {
            return Err(BackendError::Config("max_tokens must be >= 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(BackendError::Config("retry.max_attempts must be >= 1".into()));
        }
        if self.rate_limit.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return Err(BackendError::Config("rate_limit must be positive".into()));
        }
        if !self.mock && self.replay.is_none() && self.endpoint.is_empty() {
            return Err(BackendError::Config(format!("{}: endpoint required", self.backend_id)));
        }
        Ok(())
    }

    /// Instantiates the backend this config selects.
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        self.validate()?;
        if self.mock {
            return Ok(Arc::new(MockBackend::new(self.backend_id.clone(), self.seed)));
        }
        if let Some(path) = &self.replay {
            return Ok(Arc::new(ReplayBackend::load(self.backend_id.clone(), path)?));
        }
        let key = match &self.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::Config(format!("{var} is not set")))?),
            None => None,
        };
        Ok(Arc::new(OpenAiBackend::new(self.backend_id.clone(), &self.endpoint, key)?))
    }

    /// Loads one config, or a list of them, from a JSON file.
    pub fn load_many(path: &Path) -> Result<Vec<BackendConfig>, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let configs = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|c| vec![c])
        }
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(configs)
    }
}

/// Spaces out request starts to a fixed rate.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: tokio::sync::Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Self {
        RateLimiter { interval: Duration::from_secs_f64(1.0 / per_second), next: tokio::sync::Mutex::new(None) }
    }

    async fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().await;
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

/// Result of a client call, including how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome {
    pub result: Result<ChatResponse, BackendError>,
    pub attempts: u32,
}

/// A backend plus its config: caps in-flight requests, applies the rate
/// limit and retries retryable failures with exponential backoff.
pub struct BackendClient {
    backend: Arc<dyn ChatBackend>,
    config: BackendConfig,
    limiter: Option<RateLimiter>,
    in_flight: Semaphore,
}

impl BackendClient {
    pub fn new(backend: Arc<dyn ChatBackend>, config: BackendConfig) -> Self {
        let limiter = config.rate_limit.map(RateLimiter::new);
        let in_flight = Semaphore::new(config.max_in_flight.max(1));
        BackendClient { backend, config, limiter, in_flight }
    }

    pub fn from_config(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(BackendClient::new(config.build()?, config))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn backend_id(&self) -> &str {
        &self.config.backend_id
    }

    pub fn request(&self, messages: Vec<ChatMessage>, temperature: Option<f64>) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: temperature.unwrap_or(self.config.temperature),
            max_tokens: self.config.max_tokens,
        }
    }

    pub async fn chat(&self, messages: Vec<ChatMessage>) -> CallOutcome {
        self.send(&self.request(messages, None)).await
    }

    pub async fn send(&self, request: &ChatRequest) -> CallOutcome {
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let mut attempts = 0;
        loop {
            attempts += 1;
            if let Some(l) = &self.limiter {
                l.acquire().await;
            }
            let result = self.backend.complete(request).await;
            match result {
                Err(e) if e.is_retryable() && attempts < self.config.retry.max_attempts => {
                    let wait = match &e {
                        BackendError::RateLimited { retry_after: Some(d) } => *d,
                        _ => self.config.retry.backoff(attempts),
                    };
                    tracing::debug!(backend = %self.config.backend_id, attempts, ?wait, "retrying: {e}");
                    tokio::time::sleep(wait).await;
                }
                result => return CallOutcome { result, attempts },
            }
        }
    }
}

/// Deterministic in-process backend for tests and dry runs.
///
/// Answers are a pure function of (seed, request). It recognizes the
/// annotation, biography, poll and free-chat prompt shapes:
/// poll answers follow the persona's party on party-tagged options and are
/// otherwise hash-chosen among substantive options.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    seed: u64,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        MockBackend { id: id.into(), seed }
    }

    fn pick(&self, text: &str, salt: &str, n: usize) -> usize {
        (crate::seed::derive_seed(self.seed, &format!("{salt}\u{0}{text}")) % n.max(1) as u64) as usize
    }

    fn respond(&self, request: &ChatRequest) -> String {
        let all: String = request.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let last = request.last_user_message().unwrap_or("");
        let persona = persona_pairs(&all);
        if last.contains("professional annotator") {
            let letters = |n: usize, key: &str| ["A", "B", "C", "D"][self.pick(last, key, n)];
            return format!(
                "{{\"AGE\": \"{}\", \"GENDER\": \"{}\", \"RACE\": \"{}\", \"PARTY\": \"{}\", \"IDEOLOGY\": \"{}\"}}",
                letters(3, "AGE"),
                letters(2, "GENDER"),
                letters(4, "RACE"),
                letters(4, "PARTY"),
                letters(3, "IDEOLOGY")
            );
        }
        if last.contains("biographer") {
            let desc: Vec<String> = persona.iter().map(|(k, v)| format!("{k} {v}")).collect();
            let bio = format!("You are a person with {}.", if desc.is_empty() { "no listed traits".into() } else { desc.join(", ") });
            return serde_json::json!({ "answer": bio }).to_string();
        }
        let options = option_lines(last);
        if !options.is_empty() {
            let party = persona
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("partisanship") || k.eq_ignore_ascii_case("party"))
                .map(|(_, v)| v.to_ascii_lowercase());
            let substantive: Vec<&(String, String)> =
                options.iter().filter(|(_, t)| !t.contains(crate::questionnaire::REFUSAL_TEXT)).collect();
            let by_party = party.as_deref().and_then(|p| {
                let key = if p.starts_with("democrat") {
                    "democrat"
                } else if p.starts_with("republican") {
                    "republican"
                } else {
                    return None;
                };
                substantive.iter().find(|(_, t)| t.to_ascii_lowercase().contains(key))
            });
            let chosen = by_party
                .copied()
                .unwrap_or_else(|| substantive[self.pick(last, "answer", substantive.len())]);
            return format!("{{\"answer\": \"{}\"}}", chosen.0);
        }
        let who = persona
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("partisanship") || k.eq_ignore_ascii_case("party"))
            .map(|(_, v)| format!("I'm a {v} voter"))
            .unwrap_or_else(|| "I'm a voter".to_string());
        let ideology = persona
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("ideology"))
            .map(|(_, v)| format!(" and I consider myself {v}"))
            .unwrap_or_default();
        format!("{who}{ideology}. You asked: {}", last.trim())
    }
}

/// `key: value` persona lines found in prompt text.
fn persona_pairs(text: &str) -> Vec<(String, String)> {
    const KEYS: &[&str] = &["gender", "age", "race", "ideology", "partisanship", "party"];
    text.lines()
        .filter_map(|l| l.split_once(':'))
        .filter(|(k, v)| KEYS.contains(&k.trim().to_ascii_lowercase().as_str()) && !v.trim().is_empty())
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// `A. text` lines following an `Options:` header.
fn option_lines(text: &str) -> Vec<(String, String)> {
    let Some(pos) = text.find("Options:") else { return Vec::new() };
    text[pos + "Options:".len()..]
        .lines()
        .filter_map(|l| {
            let (letter, rest) = l.trim().split_once(". ")?;
            (letter.len() <= 2 && letter.chars().all(|c| c.is_ascii_uppercase()))
                .then(|| (letter.to_string(), rest.to_string()))
        })
        .collect()
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse { content: self.respond(request), latency_ms: 0 })
    }
}

/// Serves recorded responses keyed by request hash.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    id: String,
    responses: BTreeMap<String, String>,
}

impl ReplayBackend {
    pub fn new(id: impl Into<String>, responses: BTreeMap<String, String>) -> Self {
        ReplayBackend { id: id.into(), responses }
    }

    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let responses =
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(ReplayBackend::new(id, responses))
    }
}

#[async_trait]
impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hash = request.hash();
        self.responses
            .get(&hash)
            .map(|c| ChatResponse { content: c.clone(), latency_ms: 0 })
            .ok_or(BackendError::NotRecorded(hash))
    }
}

/// Wraps a backend and records every successful exchange for later replay.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        RecordingBackend { inner, recorded: Mutex::new(BTreeMap::new()) }
    }

    pub fn recorded(&self) -> BTreeMap<String, String> {
        self.recorded.lock().expect("recording lock").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.recorded())?)
    }
}

#[async_trait]
impl ChatBackend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.complete(request).await?;
        self.recorded.lock().expect("recording lock").insert(request.hash(), resp.content.clone());
        Ok(resp)
    }
}

/// OpenAI-compatible `/chat/completions` over HTTP(S).
pub struct OpenAiBackend {
    id: String,
    url: String,
    api_key: Option<String>,
    http: reqwest::Client,
}

impl OpenAiBackend {
    pub fn new(id: impl Into<String>, endpoint: &str, api_key: Option<String>) -> Result<Self, BackendError> {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(OpenAiBackend { id: id.into(), url, api_key, http })
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut req = self.http.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            return Err(BackendError::RateLimited { retry_after });
        }
        let body = resp.text().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body });
        }
        let parsed: CompletionBody =
            serde_json::from_str(&body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("response has no message content".into()))?;
        Ok(ChatResponse { content, latency_ms: started.elapsed().as_millis() as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: BackendError,
    }

    #[async_trait]
    impl ChatBackend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        async fn complete(&self, _r: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok(ChatResponse { content: "ok".into(), latency_ms: 0 })
            }
        }
    }

    fn fast_config() -> BackendConfig {
        let mut c = BackendConfig::mock("flaky", 0);
        c.retry = RetryPolicy { max_attempts: 3, initial_backoff_ms: 1, max_backoff_ms: 4 };
        c
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let b = Arc::new(Flaky { failures: 2, calls: AtomicU32::new(0), error: BackendError::Transport("reset".into()) });
        let client = BackendClient::new(b, fast_config());
        let out = client.chat(vec![ChatMessage::user("hi")]).await;
        assert_eq!(out.attempts, 3);
        assert_eq!(out.result.unwrap().content, "ok");
    }

    #[tokio::test]
    async fn gives_up_after_max_attempts() {
        let b = Arc::new(Flaky { failures: 10, calls: AtomicU32::new(0), error: BackendError::Status { status: 503, body: String::new() } });
        let client = BackendClient::new(b.clone(), fast_config());
        let out = client.chat(vec![ChatMessage::user("hi")]).await;
        assert_eq!(out.attempts, 3);
        assert!(out.result.is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn client_errors_are_not_retried() {
        let b = Arc::new(Flaky { failures: 10, calls: AtomicU32::new(0), error: BackendError::Status { status: 400, body: "bad".into() } });
        let client = BackendClient::new(b, fast_config());
        assert_eq!(client.chat(vec![ChatMessage::user("hi")]).await.attempts, 1);
    }

    #[tokio::test]
    async fn rate_limit_spaces_requests() {
        let mut cfg = BackendConfig::mock("m", 0);
        cfg.rate_limit = Some(50.0);
        let client = BackendClient::from_config(cfg).unwrap();
        let start = Instant::now();
        for _ in 0..4 {
            client.chat(vec![ChatMessage::user("x")]).await.result.unwrap();
        }
        // three gaps of 20ms after the first request
        assert!(start.elapsed() >= Duration::from_millis(55));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy { max_attempts: 5, initial_backoff_ms: 100, max_backoff_ms: 350 };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(350));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::mock("m", 0);
        assert!(c.validate().is_ok());
        c.temperature = -0.1;
        assert!(c.validate().is_err());
        let mut c = BackendConfig::mock("m", 0);
        c.max_tokens = 0;
        assert!(c.validate().is_err());
        let mut c = BackendConfig::mock("m", 0);
        c.mock = false;
        assert!(c.validate().is_err());
        let parsed: BackendConfig = serde_json::from_str(r#"{"backend_id": "x", "mock": true}"#).unwrap();
        assert_eq!(parsed.temperature, 0.5);
        assert_eq!(parsed.max_tokens, 32);
    }

    #[tokio::test]
    async fn mock_is_deterministic_and_follows_party() {
        let m = MockBackend::new("m", 3);
        let req = |party: &str| ChatRequest {
            model: "mock".into(),
            messages: vec![ChatMessage::user(format!(
                "Personal information:\npartisanship: {party}\nQuestion: Who?\nOptions:\nA. Joe Biden (Democrat)\nB. Donald Trump (Republican)\nC. DK/RF"
            ))],
            temperature: 0.5,
            max_tokens: 32,
        };
        assert_eq!(m.complete(&req("Democrat")).await.unwrap().content, r#"{"answer": "A"}"#);
        assert_eq!(m.complete(&req("Republican")).await.unwrap().content, r#"{"answer": "B"}"#);
        let a = m.complete(&req("Independent")).await.unwrap().content;
        let b = m.complete(&req("Independent")).await.unwrap().content;
        assert_eq!(a, b);
        assert_ne!(a, r#"{"answer": "C"}"#);
    }

    #[tokio::test]
    async fn replay_and_recording() {
        let inner: Arc<dyn ChatBackend> = Arc::new(MockBackend::new("m", 1));
        let rec = RecordingBackend::new(inner);
        let req = ChatRequest { model: "mock".into(), messages: vec![ChatMessage::user("hello")], temperature: 0.0, max_tokens: 8 };
        let live = rec.complete(&req).await.unwrap();
        let replay = ReplayBackend::new("r", rec.recorded());
        assert_eq!(replay.complete(&req).await.unwrap().content, live.content);
        let other = ChatRequest { max_tokens: 9, ..req };
        assert!(matches!(replay.complete(&other).await, Err(BackendError::NotRecorded(_))));
    }
}
