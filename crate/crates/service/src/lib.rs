//! HTTP API over finished simulation runs: population filters, per-question
//! distributions, voter cards, crosstabs and voter chat.

pub mod chat;
pub mod error;
pub mod index;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use electsim_core::engine::backend::BackendClient;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub use chat::{ChatSession, ChatTurn, SessionStore, Speaker};
pub use error::ServiceError;
pub use index::{
    Condition, Crosstab, DistributionMode, FilterSpec, PopulationSummary, QuestionDistribution, RunIndex,
    RunRegistry, RunSummary, VoterCard, DEFAULT_CROSSTAB_CAP,
};

#[derive(Clone)]
pub struct AppState {
    pub runs: Arc<RunRegistry>,
    pub sessions: Arc<SessionStore>,
    pub backend: Option<Arc<BackendClient>>,
    pub crosstab_cap: usize,
}

impl AppState {
    pub fn new(runs: RunRegistry, backend: Option<BackendClient>) -> Self {
        AppState {
            runs: Arc::new(runs),
            sessions: Arc::new(SessionStore::default()),
            backend: backend.map(Arc::new),
            crosstab_cap: DEFAULT_CROSSTAB_CAP,
        }
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

#[derive(Debug, Deserialize)]
struct ViewQuery {
    state: Option<String>,
    /// Conditions as `question:option` pairs, comma separated.
    #[serde(rename = "where")]
    conditions: Option<String>,
    #[serde(default)]
    mode: Option<String>,
    dims: Option<String>,
}

impl ViewQuery {
    fn spec(&self) -> Result<FilterSpec, ServiceError> {
        FilterSpec::from_query(self.state.clone(), self.conditions.as_deref())
    }
}

#[derive(Debug, Deserialize)]
pub struct SampleRequest {
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default = "default_cards")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cards() -> usize {
    100
}

#[derive(Debug, Deserialize)]
pub struct OpenSession {
    pub run_id: String,
    pub voter_id: String,
    #[serde(default)]
    pub state: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct SendMessage {
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct ChatReply {
    pub reply: String,
    pub history: Vec<ChatTurn>,
}

async fn list_runs(State(s): State<AppState>) -> Json<Vec<RunSummary>> {
    Json(s.runs.list())
}

async fn run_summary(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<RunSummary> {
    Ok(Json(s.runs.get(&id)?.summary()))
}

async fn filter(State(s): State<AppState>, Path(id): Path<String>, Json(spec): Json<FilterSpec>) -> ApiResult<PopulationSummary> {
    Ok(Json(s.runs.get(&id)?.filter_population(&spec)?))
}

async fn distribution(
    State(s): State<AppState>,
    Path((id, qid)): Path<(String, String)>,
    Query(q): Query<ViewQuery>,
) -> ApiResult<QuestionDistribution> {
    let mode = match q.mode.as_deref() {
        None | Some("absolute") => DistributionMode::Absolute,
        Some("relative") => DistributionMode::Relative,
        Some(other) => return Err(ServiceError::invalid("mode", format!("expected absolute or relative, got {other:?}"))),
    };
    Ok(Json(s.runs.get(&id)?.question_distribution(&q.spec()?, &qid, mode)?))
}

async fn sample(State(s): State<AppState>, Path(id): Path<String>, Json(req): Json<SampleRequest>) -> ApiResult<Vec<VoterCard>> {
    Ok(Json(s.runs.get(&id)?.sample_individuals(&req.filter, req.n, req.seed)?))
}

async fn crosstab(State(s): State<AppState>, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<Crosstab> {
    let dims: Vec<String> =
        q.dims.as_deref().unwrap_or("").split(',').filter(|d| !d.is_empty()).map(str::to_string).collect();
    Ok(Json(s.runs.get(&id)?.crosstab(&q.spec()?, &dims, s.crosstab_cap)?))
}

async fn open_session(State(s): State<AppState>, Json(req): Json<OpenSession>) -> ApiResult<ChatSession> {
    let run = s.runs.get(&req.run_id)?;
    let session = ChatSession::open(run, req.state.as_deref(), &req.voter_id, uuid::Uuid::new_v4().to_string())?;
    s.sessions.insert(session.clone()).await;
    Ok(Json(session))
}

async fn get_session(State(s): State<AppState>, Path(sid): Path<String>) -> ApiResult<ChatSession> {
    let session = s.sessions.get(&sid).await?;
    let snapshot = session.lock().await.clone();
    Ok(Json(snapshot))
}

async fn send_message(
    State(s): State<AppState>,
    Path(sid): Path<String>,
    Json(req): Json<SendMessage>,
) -> ApiResult<ChatReply> {
    let session = s.sessions.get(&sid).await?;
    let client = s.backend.as_ref().ok_or(ServiceError::NoBackend)?;
    let mut guard = session.lock().await;
    let reply = guard.send(&req.text, client).await?;
    Ok(Json(ChatReply { reply, history: guard.history.clone() }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/summary", get(run_summary))
        .route("/runs/{id}/filter", post(filter))
        .route("/runs/{id}/questions/{qid}/distribution", get(distribution))
        .route("/runs/{id}/individuals/sample", post(sample))
        .route("/runs/{id}/crosstab", get(crosstab))
        .route("/chat/sessions", post(open_session))
        .route("/chat/sessions/{sid}", get(get_session))
        .route("/chat/sessions/{sid}/messages", post(send_message))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
