use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use qcqc_core::completer::{CompletionError, EmbedError};
use qcqc_core::evalharness::EvalError;
use qcqc_core::gallery::GalleryError;
use qcqc_core::search::SearchError;
use serde::{Deserialize, Serialize};

/// Error body of every failed `/api` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub http_status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            http_status: status.as_u16(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn status(&self) -> StatusCode {
        StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

impl From<CompletionError> for ApiError {
    fn from(e: CompletionError) -> Self {
        let (status, code) = match &e {
            CompletionError::EmptyPrefix => (StatusCode::BAD_REQUEST, "empty_prefix"),
            CompletionError::UnknownLevelLabel(_) => (StatusCode::BAD_REQUEST, "unknown_level"),
            CompletionError::LevelsNotAssigned => {
                (StatusCode::BAD_REQUEST, "levels_not_assigned")
            }
            CompletionError::EmptyGallery => (StatusCode::BAD_REQUEST, "empty_gallery"),
            CompletionError::Timeout => (StatusCode::BAD_GATEWAY, "endpoint_timeout"),
            CompletionError::HttpError(_) => (StatusCode::BAD_GATEWAY, "endpoint_http_error"),
            CompletionError::MalformedResponse(_) => {
                (StatusCode::BAD_GATEWAY, "endpoint_malformed")
            }
            CompletionError::Unreachable(_) => (StatusCode::BAD_GATEWAY, "endpoint_unreachable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<EmbedError> for ApiError {
    fn from(e: EmbedError) -> Self {
        match &e {
            EmbedError::EmptyText => ApiError::new(StatusCode::BAD_REQUEST, "empty_text", e.to_string()),
            EmbedError::InvalidDimension(_) => ApiError::internal(e.to_string()),
            EmbedError::Endpoint(_) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "embedder_failure", e.to_string())
            }
        }
    }
}

impl From<SearchError> for ApiError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::DimensionMismatch { .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "dimension_mismatch", e.to_string())
            }
            SearchError::EmbedderFailure { source, .. } => ApiError::from(source),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Completion(c) => ApiError::from(c),
            EvalError::LevelsNotAssigned => ApiError::new(
                StatusCode::BAD_REQUEST,
                "levels_not_assigned",
                e.to_string(),
            ),
            EvalError::Io(_) | EvalError::Serialize(_) => ApiError::internal(e.to_string()),
            other => ApiError::invalid(other.to_string()),
        }
    }
}

impl From<GalleryError> for ApiError {
    fn from(e: GalleryError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "gallery_error", e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::invalid(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::invalid(e.body_text())
    }
}

/// `Json` whose rejections come back as [`ApiError`] bodies.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(value) = Json::<T>::from_request(req, state).await?;
        Ok(ApiJson(value))
    }
}
