use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("run at {path} is unreadable: {message}")]
    CorruptRun { path: String, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no chat backend configured")]
    NoBackend,
}

impl ServiceError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError::Invalid { path: path.into(), message: message.into() }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid { .. } | ServiceError::CorruptRun { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Backend(_) => StatusCode::BAD_GATEWAY,
            ServiceError::NoBackend => StatusCode::SERVICE_UNAVAILABLE,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::Invalid { path, .. } = &self {
            body["path"] = json!(path);
        }
        (self.status(), Json(body)).into_response()
    }
}
