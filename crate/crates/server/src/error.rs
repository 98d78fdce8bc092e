use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use entropy_core::platform::PlatformError;
use serde_json::json;

/// Error body: `{"error": {"code": "...", "message": "..."}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_owned(), message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", format!("no route for {what}"))
    }
}

/// HTTP status for a machine-readable error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "unknown-entity" | "unknown-stream" | "unknown-campaign" | "unknown-recommendation" | "unknown-rule" | "unknown-user"
        | "unknown-result" | "unknown-template" | "unknown-subscription" | "unknown-condition" | "unknown-composite" => {
            StatusCode::NOT_FOUND
        }
        "idempotency-conflict" | "wrong-state" | "wrong-campaign-state" | "clock-backwards" | "stale-timestamp"
        | "invalid-transition" | "campaign-not-active" | "clock-not-simulated" => StatusCode::CONFLICT,
        "journal-error" | "storage-failure" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let code = e.code();
        ApiError::new(status_for(code), code, e.to_string())
    }
}

macro_rules! from_module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                PlatformError::from(e).into()
            }
        }
    )*};
}

from_module_error!(
    entropy_core::broker::BrokerError,
    entropy_core::timeseries::TimeSeriesError,
    entropy_core::stream::StreamError,
    entropy_core::recommender::RecommenderError,
    entropy_core::analytics::AnalyticsError,
    entropy_core::fusion::FusionError
);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = %self.code, message = %self.message, "request failed");
        }
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}
