use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown frame {0}")]
    UnknownFrame(String),
    #[error("no clustering for frame {0}")]
    MissingClustering(String),
    #[error("point {got} is not the current click (expected {expected:?})")]
    OutOfOrder { expected: Option<u32>, got: u32 },
    #[error("class {class} outside 0..{num_classes}")]
    InvalidClass { class: u32, num_classes: usize },
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("point {index} outside frame of {points} points")]
    InvalidPoint { index: u32, points: usize },
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession(_) => "UNKNOWN_SESSION",
            ApiError::UnknownFrame(_) => "UNKNOWN_FRAME",
            ApiError::MissingClustering(_) => "MISSING_CLUSTERING",
            ApiError::OutOfOrder { .. } => "OUT_OF_ORDER",
            ApiError::InvalidClass { .. } => "INVALID_CLASS",
            ApiError::NothingToUndo => "NOTHING_TO_UNDO",
            ApiError::InvalidPoint { .. } => "INVALID_POINT",
            ApiError::Internal(_) => "INTERNAL",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) | ApiError::UnknownFrame(_) => StatusCode::NOT_FOUND,
            ApiError::MissingClustering(_) | ApiError::OutOfOrder { .. } | ApiError::NothingToUndo => {
                StatusCode::CONFLICT
            }
            ApiError::InvalidClass { .. } | ApiError::InvalidPoint { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<milliseg_core::Error> for ApiError {
    fn from(e: milliseg_core::Error) -> Self {
        match e {
            milliseg_core::Error::UnknownFrame(id) => ApiError::UnknownFrame(id),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

/// Error body: `{"error": CODE, "message": text}`.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
