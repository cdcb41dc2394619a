use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use facedodge::attack::AttackError;
use facedodge::harness::HarnessError;
use facedodge::image::ImageError;
use facedodge::makeup::MakeupError;
use facedodge::synthface::SynthError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StudioError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("unknown identity {0}")]
    UnknownIdentity(String),
    #[error("invalid upload: {0}")]
    InvalidUpload(String),
    #[error("rejected layer: {0}")]
    RejectedLayer(#[from] MakeupError),
    #[error("nothing to undo")]
    EmptyHistory,
    #[error("no region has opacity budget left")]
    Exhausted,
    #[error(transparent)]
    Attack(AttackError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("worker task failed: {0}")]
    Worker(String),
}

impl From<AttackError> for StudioError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Exhausted => StudioError::Exhausted,
            AttackError::Makeup(m) => StudioError::RejectedLayer(m),
            other => StudioError::Attack(other),
        }
    }
}

impl StudioError {
    pub fn status(&self) -> StatusCode {
        match self {
            StudioError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            StudioError::UnknownIdentity(_) | StudioError::InvalidUpload(_) => {
                StatusCode::BAD_REQUEST
            }
            StudioError::RejectedLayer(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StudioError::EmptyHistory | StudioError::Exhausted => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}
