//! Error responses: an HTTP status plus a machine-readable code.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dataprod_core::db::DbError;
use dataprod_core::fixture::FixtureError;
use dataprod_core::orchestrator::{ApprovalError, OrchestratorError, TransitionError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.into(), message: message.into() }
    }

    pub fn not_connected() -> Self {
        Self::new(StatusCode::CONFLICT, "not_connected", "no data source is connected")
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code, message: self.message };
        (self.status, Json(serde_json::json!({ "error": body }))).into_response()
    }
}

impl From<TransitionError> for ApiError {
    fn from(e: TransitionError) -> Self {
        Self::new(StatusCode::CONFLICT, "invalid_transition", e.to_string())
    }
}

impl From<ApprovalError> for ApiError {
    fn from(e: ApprovalError) -> Self {
        Self::new(StatusCode::CONFLICT, e.code(), e.to_string())
    }
}

impl From<DbError> for ApiError {
    fn from(e: DbError) -> Self {
        let status = match e {
            DbError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<FixtureError> for ApiError {
    fn from(e: FixtureError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_questions", e.to_string())
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let status = match &e {
            OrchestratorError::Db(db) => return db.clone().into(),
            OrchestratorError::Transition(t) => return t.clone().into(),
            OrchestratorError::Metrics(_)
            | OrchestratorError::InvalidQuestion(_)
            | OrchestratorError::InvalidConfig(_)
            | OrchestratorError::NoContract => StatusCode::UNPROCESSABLE_ENTITY,
            OrchestratorError::ConnectionLost(_) => StatusCode::SERVICE_UNAVAILABLE,
            OrchestratorError::Version(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}
