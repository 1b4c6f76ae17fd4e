use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use crawlcurate_core::dataset_io::DatasetError;
use crawlcurate_core::knn::KnnError;
use thiserror::Error;

/// Failure to bring the service up.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("index: {0}")]
    Index(#[from] KnnError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("index and metadata disagree: {0}")]
    Inconsistent(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Request-level error, rendered as `{"error": message}`.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}
