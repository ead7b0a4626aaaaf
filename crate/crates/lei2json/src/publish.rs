//! Sends converted rows through the gateway: `/validate` first, then
//! `/publish/{eventType}` for rows that pass.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use leisa_core::domain::serialize_envelope;
use leisa_core::SchemaRegistry;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::convert::{convert_rows, ConvertError, ConvertedRow};
use crate::mapping::ColumnMapping;

pub const MAX_IN_FLIGHT: usize = 16;

#[derive(Debug, Clone)]
pub struct Target {
    pub base_url: String,
    pub username: String,
    pub password: String,
    /// Concurrent requests, 1 to [`MAX_IN_FLIGHT`].
    pub in_flight: usize,
}

impl Target {
    pub fn new(base_url: &str, username: &str, password: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            username: username.to_owned(),
            password: password.to_owned(),
            in_flight: MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "camelCase")]
pub enum RowOutcome {
    ConversionFailed {
        column: Option<String>,
        detail: String,
    },
    ValidationFailed {
        detail: String,
    },
    #[serde(rename_all = "camelCase")]
    Published {
        delivered_to: Vec<String>,
    },
    PublishFailed {
        http: u16,
        detail: String,
    },
    /// The run stopped before this row was sent.
    NotAttempted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowReport {
    pub row: u64,
    #[serde(flatten)]
    pub outcome: RowOutcome,
}

/// Per-row outcomes in file order plus their tallies. For a run that was not
/// aborted, `converted = validated + validation_failed` and
/// `validated = published + publish_failed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishSummary {
    pub converted: usize,
    pub conversion_failed: usize,
    pub validated: usize,
    pub validation_failed: usize,
    pub published: usize,
    pub publish_failed: usize,
    pub not_attempted: usize,
    pub rows: Vec<RowReport>,
}

impl PublishSummary {
    pub fn failed(&self) -> usize {
        self.conversion_failed + self.validation_failed + self.publish_failed
    }

    fn tally(rows: Vec<RowReport>, converted: usize) -> Self {
        let mut s = PublishSummary { converted, rows, ..Default::default() };
        for r in &s.rows {
            match r.outcome {
                RowOutcome::ConversionFailed { .. } => s.conversion_failed += 1,
                RowOutcome::ValidationFailed { .. } => s.validation_failed += 1,
                RowOutcome::Published { .. } => {
                    s.validated += 1;
                    s.published += 1
                }
                RowOutcome::PublishFailed { .. } => {
                    s.validated += 1;
                    s.publish_failed += 1
                }
                RowOutcome::NotAttempted => s.not_attempted += 1,
            }
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum PublishError {
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error("in_flight must be between 1 and {MAX_IN_FLIGHT}")]
    InvalidOptions,
    #[error("gateway rejected the credentials: {detail}")]
    Unauthorized { detail: String, summary: Box<PublishSummary> },
    #[error("{0} is not a producer")]
    NotAProducer(String),
    #[error("gateway failed: {detail}")]
    Transport { detail: String, summary: Box<PublishSummary> },
}

impl PublishError {
    /// Rows handled before the run stopped, when it got that far.
    pub fn summary(&self) -> Option<&PublishSummary> {
        match self {
            PublishError::Unauthorized { summary, .. } | PublishError::Transport { summary, .. } => Some(summary),
            _ => None,
        }
    }
}

enum Abort {
    Auth(String),
    NotAProducer,
    Transport(String),
}

struct Session<'a> {
    http: Client,
    target: &'a Target,
}

fn error_detail(resp: Response) -> String {
    let status = resp.status();
    let body: Value = resp.json().unwrap_or(Value::Null);
    match (body["error"].as_str(), body["detail"].as_str()) {
        (Some(code), Some(detail)) => format!("HTTP {status} {code}: {detail}"),
        _ => format!("HTTP {status}"),
    }
}

impl Session<'_> {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.target.base_url, path)
    }

    fn login(&self) -> Result<(), Abort> {
        let resp = self
            .http
            .post(self.url("/services/login"))
            .json(&json!({"username": self.target.username, "password": self.target.password}))
            .send()
            .map_err(|e| Abort::Transport(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => {
                let body: Value = resp.json().map_err(|e| Abort::Transport(e.to_string()))?;
                if body["role"] == "producer" {
                    Ok(())
                } else {
                    Err(Abort::NotAProducer)
                }
            }
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(Abort::Auth(error_detail(resp))),
            _ => Err(Abort::Transport(error_detail(resp))),
        }
    }

    fn send_row(&self, row: &ConvertedRow) -> Result<RowOutcome, Abort> {
        let body = serialize_envelope(&row.envelope);
        let transport = |e: reqwest::Error| Abort::Transport(e.to_string());
        let resp = self
            .http
            .post(self.url("/validate"))
            .header("content-type", "application/json")
            .body(body.clone())
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => {}
            StatusCode::BAD_REQUEST | StatusCode::UNPROCESSABLE_ENTITY => {
                return Ok(RowOutcome::ValidationFailed { detail: validation_detail(resp) })
            }
            _ => return Err(Abort::Transport(error_detail(resp))),
        }
        let resp = self
            .http
            .post(self.url(&format!("/publish/{}", row.envelope.event_type)))
            .basic_auth(&self.target.username, Some(&self.target.password))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => {
                let receipt: Value = resp.json().map_err(transport)?;
                let delivered_to = receipt["deliveredTo"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|q| q.as_str().map(str::to_owned)).collect())
                    .unwrap_or_default();
                Ok(RowOutcome::Published { delivered_to })
            }
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(Abort::Auth(error_detail(resp))),
            status => Ok(RowOutcome::PublishFailed { http: status.as_u16(), detail: error_detail(resp) }),
        }
    }
}

fn validation_detail(resp: Response) -> String {
    let status = resp.status();
    let body: Value = resp.json().unwrap_or(Value::Null);
    match body["violations"].as_array() {
        Some(vs) if !vs.is_empty() => vs
            .iter()
            .map(|v| format!("{}: {}", v["path"].as_str().unwrap_or("$"), v["message"].as_str().unwrap_or("")))
            .collect::<Vec<_>>()
            .join("; "),
        _ => body["detail"].as_str().map_or_else(|| format!("HTTP {status}"), str::to_owned),
    }
}

/// Converts `csv` and pushes every row through the gateway as `target`'s
/// producer. Row-level failures are counted, never fatal. Bad credentials and
/// transport failures stop the run; the error carries what was done so far.
pub fn convert_and_publish(
    csv: &Path,
    event_type: &str,
    mapping: Option<&ColumnMapping>,
    schemas: &SchemaRegistry,
    target: &Target,
) -> Result<PublishSummary, PublishError> {
    if !(1..=MAX_IN_FLIGHT).contains(&target.in_flight) {
        return Err(PublishError::InvalidOptions);
    }
    let conversion = convert_rows(csv, event_type, mapping, schemas)?;
    let http = Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| PublishError::Transport { detail: e.to_string(), summary: Box::default() })?;
    let session = Session { http, target };
    match session.login() {
        Ok(()) => {}
        Err(Abort::NotAProducer) => return Err(PublishError::NotAProducer(target.username.clone())),
        Err(Abort::Auth(detail)) => return Err(PublishError::Unauthorized { detail, summary: Box::default() }),
        Err(Abort::Transport(detail)) => return Err(PublishError::Transport { detail, summary: Box::default() }),
    }

    let rows = &conversion.envelopes;
    let outcomes: Vec<Mutex<Option<RowOutcome>>> = rows.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let abort: Mutex<Option<Abort>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..target.in_flight.min(rows.len()) {
            s.spawn(|| loop {
                if stop.load(Ordering::Acquire) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::AcqRel);
                let Some(row) = rows.get(i) else { return };
                match session.send_row(row) {
                    Ok(outcome) => *outcomes[i].lock().unwrap() = Some(outcome),
                    Err(a) => {
                        stop.store(true, Ordering::Release);
                        abort.lock().unwrap().get_or_insert(a);
                        return;
                    }
                }
            });
        }
    });

    let mut reports: Vec<RowReport> = conversion
        .envelopes
        .iter()
        .zip(outcomes)
        .map(|(r, o)| RowReport { row: r.row, outcome: o.into_inner().unwrap().unwrap_or(RowOutcome::NotAttempted) })
        .chain(conversion.errors.iter().map(|e| RowReport {
            row: e.row,
            outcome: RowOutcome::ConversionFailed { column: e.column.clone(), detail: e.message.clone() },
        }))
        .collect();
    reports.sort_by_key(|r| r.row);
    let summary = Box::new(PublishSummary::tally(reports, conversion.envelopes.len()));
    match abort.into_inner().unwrap() {
        None => Ok(*summary),
        Some(Abort::NotAProducer) => Err(PublishError::NotAProducer(target.username.clone())),
        Some(Abort::Auth(detail)) => Err(PublishError::Unauthorized { detail, summary }),
        Some(Abort::Transport(detail)) => Err(PublishError::Transport { detail, summary }),
    }
}
