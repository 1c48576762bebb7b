use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use teller_core::api::ErrorBody;
use teller_core::branch::BranchError;
use teller_core::dialog::DialogError;
use teller_core::sim::SimError;
use thiserror::Error;

/// Startup failures.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Error)]
#[error("{status}: {} ({})", body.code, body.detail)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                detail: detail.into(),
            },
        }
    }

    pub fn stopped() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "stopped",
            "service event loop has stopped",
        )
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<BranchError> for ApiError {
    fn from(e: BranchError) -> Self {
        let (status, code) = match &e {
            BranchError::UnknownStation(_) => (StatusCode::NOT_FOUND, "unknown_station"),
            BranchError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            BranchError::NoOpenSession(_) => (StatusCode::NOT_FOUND, "no_open_session"),
            BranchError::WrongState { .. } => (StatusCode::CONFLICT, "wrong_state"),
            BranchError::AuthFailed => (StatusCode::UNAUTHORIZED, "auth_failed"),
            BranchError::UnknownRole(_) => (StatusCode::BAD_REQUEST, "unknown_role"),
            BranchError::NoStationsAvailable => {
                (StatusCode::SERVICE_UNAVAILABLE, "no_stations_available")
            }
            BranchError::RegistrationRejected(_) => (StatusCode::CONFLICT, "registration_rejected"),
            BranchError::InvalidStation(_) => (StatusCode::BAD_REQUEST, "invalid_station"),
            BranchError::ConsentDenied(_) => (StatusCode::FORBIDDEN, "consent_denied"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<DialogError> for ApiError {
    fn from(e: DialogError) -> Self {
        match e {
            DialogError::Branch(b) => b.into(),
            e @ DialogError::NotInService(..) => {
                Self::new(StatusCode::CONFLICT, "not_in_service", e.to_string())
            }
        }
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string())
            }
            SimError::InvariantViolation { .. } | SimError::TimeRegression { .. } => Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "invariant_violation",
                e.to_string(),
            ),
            SimError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
