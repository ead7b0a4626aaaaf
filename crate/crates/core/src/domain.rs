//! Shared value types and the on-wire event envelope.
//!
//! An envelope travels as a JSON object:
//!
//! ```json
//! {"eventType": "weightEvent", "payload": {"animalId": "AU123", "weightKg": 412.5}}
//! ```
//!
//! The event type may also arrive out of band (a path or query parameter); when
//! both are present they must agree.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Name of a livestock event family, e.g. `weightEvent`.
///
/// Always matches `[A-Za-z][A-Za-z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct EventType(String);

impl EventType {
    pub fn new(name: impl Into<String>) -> Result<Self, EnvelopeError> {
        let name = name.into();
        if is_valid_event_type(&name) {
            Ok(Self(name))
        } else {
            Err(EnvelopeError::InvalidEventType(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_valid_event_type(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for EventType {
    type Err = EnvelopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl<'de> Deserialize<'de> for EventType {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        EventType::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Whether a registered service emits events or receives them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceRole {
    Producer,
    Consumer,
}

impl ServiceRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceRole::Producer => "producer",
            ServiceRole::Consumer => "consumer",
        }
    }
}

impl fmt::Display for ServiceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "producer" => Ok(ServiceRole::Producer),
            "consumer" => Ok(ServiceRole::Consumer),
            other => Err(format!("unknown service role `{other}`")),
        }
    }
}

pub const MIN_PASSWORD_LEN: usize = 8;
pub const MAX_USERNAME_LEN: usize = 64;

/// A username/password pair as supplied by a client.
#[derive(Clone, PartialEq, Eq)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialsError {
    #[error("username must be 1..={MAX_USERNAME_LEN} printable characters without ':'")]
    BadUsername,
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
}

impl Credentials {
    pub fn new(username: impl Into<String>, password: impl Into<String>) -> Result<Self, CredentialsError> {
        let username = username.into();
        let password = password.into();
        check_username(&username)?;
        check_password(&password)?;
        Ok(Self { username, password })
    }
}

// ':' is excluded because HTTP Basic splits user and password on the first colon.
pub fn check_username(username: &str) -> Result<(), CredentialsError> {
    let len = username.chars().count();
    if len == 0 || len > MAX_USERNAME_LEN || username.chars().any(|c| c == ':' || c.is_control()) {
        return Err(CredentialsError::BadUsername);
    }
    Ok(())
}

pub fn check_password(password: &str) -> Result<(), CredentialsError> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(CredentialsError::WeakPassword);
    }
    Ok(())
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credentials").field("username", &self.username).field("password", &"<redacted>").finish()
    }
}

/// A livestock event as it moves through the system.
#[derive(Debug, Clone, PartialEq)]
pub struct EventEnvelope {
    pub event_type: EventType,
    pub payload: Map<String, Value>,
    /// Assigned at ingress. Informational only.
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("malformed JSON at byte {offset}: {detail}")]
    MalformedJson { offset: usize, detail: String },
    #[error("expected a JSON object for {what}, found {found}")]
    NotAnObject { what: &'static str, found: &'static str },
    #[error("envelope has no eventType")]
    MissingEventType,
    #[error("envelope has no payload")]
    MissingPayload,
    #[error("invalid event type `{0}`")]
    InvalidEventType(String),
    #[error("eventType `{body}` in body disagrees with `{param}` in request")]
    EventTypeMismatch { body: String, param: String },
}

impl EnvelopeError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EnvelopeError::MalformedJson { .. } => "MalformedJson",
            EnvelopeError::NotAnObject { .. } => "NotAnObject",
            EnvelopeError::MissingEventType => "MissingEventType",
            EnvelopeError::MissingPayload => "MissingPayload",
            EnvelopeError::InvalidEventType(_) => "InvalidEventType",
            EnvelopeError::EventTypeMismatch { .. } => "EventTypeMismatch",
        }
    }
}

impl EventEnvelope {
    pub fn new(event_type: EventType, payload: Map<String, Value>) -> Self {
        Self { event_type, payload, received_at: Utc::now() }
    }
}

/// Parses a JSON envelope, stamping `received_at` with the current time.
pub fn parse_envelope(raw: &[u8]) -> Result<EventEnvelope, EnvelopeError> {
    parse_envelope_with(raw, None)
}

/// Parses a JSON envelope whose event type may also be given out of band.
///
/// `event_type_param` fills in a missing `eventType` field; if the body carries
/// one as well, the two must be equal.
pub fn parse_envelope_with(raw: &[u8], event_type_param: Option<&str>) -> Result<EventEnvelope, EnvelopeError> {
    let value = parse_json(raw)?;
    let Value::Object(mut top) = value else {
        return Err(EnvelopeError::NotAnObject { what: "envelope", found: kind_of(&value) });
    };

    let body_type = match top.get("eventType") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(EnvelopeError::InvalidEventType(other.to_string())),
    };
    let name = match (body_type, event_type_param) {
        (Some(body), Some(param)) if body != param => {
            return Err(EnvelopeError::EventTypeMismatch { body, param: param.to_owned() })
        }
        (Some(body), _) => body,
        (None, Some(param)) => param.to_owned(),
        (None, None) => return Err(EnvelopeError::MissingEventType),
    };
    let event_type = EventType::new(name)?;

    let payload = match top.remove("payload") {
        None => return Err(EnvelopeError::MissingPayload),
        Some(Value::Object(map)) => map,
        Some(other) => return Err(EnvelopeError::NotAnObject { what: "payload", found: kind_of(&other) }),
    };

    Ok(EventEnvelope { event_type, payload, received_at: Utc::now() })
}

/// Parses arbitrary bytes as JSON, reporting the byte offset of syntax errors.
pub fn parse_json(raw: &[u8]) -> Result<Value, EnvelopeError> {
    serde_json::from_slice(raw).map_err(|e| EnvelopeError::MalformedJson {
        offset: if e.is_eof() { raw.len() } else { byte_offset(raw, e.line(), e.column()) },
        detail: e.to_string(),
    })
}

// serde_json reports 1-based line/column; column counts bytes within the line.
fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for _ in 1..line {
        match raw[offset..].iter().position(|&b| b == b'\n') {
            Some(nl) => offset += nl + 1,
            None => return raw.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(raw.len())
}

pub(crate) fn kind_of(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Serializes an envelope to its canonical wire form.
///
/// Key order is `eventType`, `payload`, `receivedAt`; payload keys keep their
/// original order.
pub fn serialize_envelope(env: &EventEnvelope) -> Vec<u8> {
    serde_json::to_vec(&envelope_to_value(env)).expect("JSON values always serialize")
}

pub fn envelope_to_value(env: &EventEnvelope) -> Value {
    let mut out = Map::with_capacity(3);
    out.insert("eventType".into(), Value::String(env.event_type.0.clone()));
    out.insert("payload".into(), Value::Object(env.payload.clone()));
    out.insert("receivedAt".into(), Value::String(format_timestamp(&env.received_at)));
    Value::Object(out)
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Micros, true)
}
