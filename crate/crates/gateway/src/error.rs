use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use leisa_core::domain::EnvelopeError;
use leisa_core::{BrokerError, RegistryError, RoutingError};
use serde_json::{json, Map, Value};

tokio::task_local! {
    pub(crate) static REQUEST_ID: String;
}

pub(crate) fn current_request_id() -> String {
    REQUEST_ID.try_with(Clone::clone).unwrap_or_default()
}

/// Every non-2xx response: `{"error", "detail", "requestId"}` plus optional
/// extra fields (violations, partial receipts).
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub detail: String,
    pub extra: Map<String, Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self { status, code, detail: detail.into(), extra: Map::new() }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.to_owned(), value);
        self
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", detail)
    }

    pub fn unauthenticated(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthenticated", detail)
    }

    pub fn forbidden(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, code, detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = Map::new();
        body.insert("error".into(), json!(self.code));
        body.insert("detail".into(), json!(self.detail));
        body.insert("requestId".into(), json!(current_request_id()));
        body.extend(self.extra);
        if self.status.is_server_error() {
            log::warn!("{} {}: {}", self.status.as_u16(), self.code, self.detail);
        }
        let mut resp = (self.status, Json(Value::Object(body))).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Basic realm=\"leisa\""));
        }
        resp
    }
}

impl From<EnvelopeError> for ApiError {
    fn from(e: EnvelopeError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.code(), e.to_string())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let detail = e.to_string();
        match e {
            RegistryError::InvalidUsername => Self::new(StatusCode::BAD_REQUEST, "InvalidUsername", detail),
            RegistryError::WeakPassword => Self::new(StatusCode::BAD_REQUEST, "WeakPassword", detail),
            RegistryError::NothingToUpdate => Self::new(StatusCode::BAD_REQUEST, "NothingToUpdate", detail),
            RegistryError::UsernameTaken(_) => Self::new(StatusCode::CONFLICT, "UsernameTaken", detail),
            RegistryError::InvalidCredentials => Self::new(StatusCode::UNAUTHORIZED, "InvalidCredentials", detail),
            RegistryError::UnknownService(_) => Self::new(StatusCode::NOT_FOUND, "UnknownService", detail),
            RegistryError::PermissionDenied(_) => Self::forbidden("PermissionDenied", detail),
            RegistryError::BrokerUnavailable(_) | RegistryError::RegistrationAborted(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "BrokerUnavailable", detail)
            }
            RegistryError::Storage(_) => Self::internal(detail),
        }
    }
}

impl From<RoutingError> for ApiError {
    fn from(e: RoutingError) -> Self {
        let detail = e.to_string();
        match e {
            RoutingError::NotAProducer => Self::forbidden("NotAProducer", detail),
            RoutingError::UnknownConsumer(id) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownConsumer", detail).with("consumerId", json!(id))
            }
            RoutingError::Storage(_) => Self::internal(detail),
        }
    }
}

impl From<BrokerError> for ApiError {
    fn from(e: BrokerError) -> Self {
        let detail = e.to_string();
        match e {
            BrokerError::PermissionDenied { .. } => Self::forbidden("PermissionDenied", detail),
            BrokerError::UnknownQueue(_) => Self::new(StatusCode::NOT_FOUND, "UnknownQueue", detail),
            BrokerError::UnknownMessage(_) => Self::new(StatusCode::NOT_FOUND, "UnknownMessage", detail),
            BrokerError::NotDelivered(_) => Self::new(StatusCode::CONFLICT, "NotDelivered", detail),
            _ => Self::new(StatusCode::SERVICE_UNAVAILABLE, "BrokerUnavailable", detail),
        }
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        Self::internal(format!("worker failed: {e}"))
    }
}
