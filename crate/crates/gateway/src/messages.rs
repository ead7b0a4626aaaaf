use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use leisa_core::broker::{Delivery, QueueName};
use leisa_core::domain::{format_timestamp, parse_envelope_with, serialize_envelope};
use leisa_core::{BrokerError, EventType, Service, ServiceRole, ValidationResult};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::auth::Authed;
use crate::error::ApiError;
use crate::{blocking, json_body, Gateway};

pub const DEFAULT_WAIT_SECS: f64 = 30.0;
pub const MAX_WAIT_SECS: f64 = 300.0;
pub const DEFAULT_MAX_MESSAGES: usize = 100;
pub const MAX_MESSAGES_LIMIT: usize = 10_000;

/// What a producer gets back from a publish.
#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishReceipt {
    pub event_type: EventType,
    pub validation: ValidationResult,
    pub delivered_to: Vec<QueueName>,
    /// Broker message id per delivered queue.
    pub message_ids: BTreeMap<String, u64>,
}

/// A message as handed to a consumer, over long-poll or the stream.
#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct WireMessage {
    pub message_id: u64,
    pub enqueued_at: String,
    pub event: Box<RawValue>,
}

impl From<Delivery> for WireMessage {
    fn from(d: Delivery) -> Self {
        let event = String::from_utf8(d.body)
            .ok()
            .and_then(|s| RawValue::from_string(s).ok())
            .unwrap_or_else(|| RawValue::from_string("null".into()).unwrap());
        Self { message_id: d.message_id, enqueued_at: format_timestamp(&d.enqueued_at), event }
    }
}

fn schema_violation(result: &ValidationResult) -> ApiError {
    let n = result.violations().len();
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "SchemaViolation", format!("{n} schema violation(s)"))
        .with("valid", json!(false))
        .with("violations", serde_json::to_value(result.violations()).expect("violations serialize"))
}

pub(crate) async fn validate(
    State(gw): State<Arc<Gateway>>,
    Query(params): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Json<ValidationResult>, ApiError> {
    let env = parse_envelope_with(&body, params.get("eventType").map(String::as_str))?;
    let result = gw.schemas.validate(&env);
    if result.is_valid() {
        Ok(Json(result))
    } else {
        Err(schema_violation(&result))
    }
}

pub(crate) async fn publish(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Path(event_type): Path<String>,
    body: Bytes,
) -> Result<Json<PublishReceipt>, ApiError> {
    if caller.role != ServiceRole::Producer {
        return Err(ApiError::forbidden("NotAProducer", format!("{} is not a producer", caller.username)));
    }
    let env = parse_envelope_with(&body, Some(&event_type))?;
    let validation = gw.schemas.validate(&env);
    if !validation.is_valid() {
        return Err(schema_violation(&validation));
    }
    let bytes = serialize_envelope(&env);
    let et = env.event_type.clone();
    let (targets, outcomes) = blocking(&gw, move |gw| {
        let targets = gw.registry.routing().resolve(caller.service_id, &et)?;
        let outcomes: Vec<Result<u64, BrokerError>> =
            targets.iter().map(|q| gw.registry.broker().publish(&caller.username, q.as_str(), &bytes)).collect();
        Ok::<_, ApiError>((targets, outcomes))
    })
    .await?;

    let mut receipt = PublishReceipt {
        event_type: env.event_type,
        validation,
        delivered_to: Vec::new(),
        message_ids: BTreeMap::new(),
    };
    let mut failures = serde_json::Map::new();
    for (queue, outcome) in targets.into_iter().zip(outcomes) {
        match outcome {
            Ok(id) => {
                receipt.message_ids.insert(queue.to_string(), id);
                receipt.delivered_to.push(queue);
            }
            Err(e) => {
                failures.insert(queue.to_string(), json!(e.to_string()));
            }
        }
    }
    if failures.is_empty() {
        return Ok(Json(receipt));
    }
    let n = failures.len();
    Err(ApiError::new(StatusCode::BAD_GATEWAY, "PartialDelivery", format!("{n} queue(s) refused the message"))
        .with("receipt", serde_json::to_value(&receipt).expect("receipt serializes"))
        .with("failures", Value::Object(failures)))
}

fn own_queue(caller: &Service) -> Result<QueueName, ApiError> {
    caller
        .queue_name
        .clone()
        .ok_or_else(|| ApiError::forbidden("NotAConsumer", format!("{} is not a consumer", caller.username)))
}

/// The caller's queue, or 403 if the request names some other queue.
fn requested_queue(caller: &Service, params: &HashMap<String, String>) -> Result<QueueName, ApiError> {
    let own = own_queue(caller)?;
    match params.get("queue") {
        Some(q) if q != own.as_str() => {
            Err(ApiError::forbidden("ForeignQueue", format!("{} may only read {own}", caller.username))
                .with("queue", json!(q)))
        }
        _ => Ok(own),
    }
}

fn parse_param<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    params
        .get(key)
        .map(|raw| raw.parse().map_err(|_| ApiError::bad_request(format!("bad `{key}` parameter `{raw}`"))))
        .transpose()
}

fn batch_size(params: &HashMap<String, String>) -> Result<usize, ApiError> {
    let max = parse_param(params, "max")?.unwrap_or(DEFAULT_MAX_MESSAGES);
    if max == 0 || max > MAX_MESSAGES_LIMIT {
        return Err(ApiError::bad_request(format!("`max` must be in 1..={MAX_MESSAGES_LIMIT}")));
    }
    Ok(max)
}

#[derive(Debug, Serialize)]
pub struct ConsumeResponse {
    pub messages: Vec<WireMessage>,
}

/// Long-poll fetch from the caller's own queue. `wait` is in seconds. An
/// optional `queue` parameter must name that same queue.
pub(crate) async fn consume(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<ConsumeResponse>, ApiError> {
    let queue = requested_queue(&caller, &params)?;
    let max = batch_size(&params)?;
    let wait: f64 = parse_param(&params, "wait")?.unwrap_or(DEFAULT_WAIT_SECS);
    if !(0.0..=MAX_WAIT_SECS).contains(&wait) {
        return Err(ApiError::bad_request(format!("`wait` must be in 0..={MAX_WAIT_SECS} seconds")));
    }
    let deliveries = blocking(&gw, move |gw| {
        gw.registry.broker().consume(&caller.username, queue.as_str(), max, Duration::from_secs_f64(wait))
    })
    .await?;
    Ok(Json(ConsumeResponse { messages: deliveries.into_iter().map(WireMessage::from).collect() }))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct AckRequest {
    message_ids: Vec<u64>,
}

pub(crate) async fn ack(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Query(params): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let queue = requested_queue(&caller, &params)?;
    let req: AckRequest = json_body(&body)?;
    let n = blocking(&gw, move |gw| gw.registry.broker().ack_many(&caller.username, queue.as_str(), &req.message_ids))
        .await?;
    Ok(Json(json!({ "acked": n })))
}

/// Upgrades to a WebSocket that pushes messages as they arrive. At most
/// `max` messages are outstanding; the client acks with `{"ack": [ids]}`.
/// Anything unacked when the socket closes goes back to the queue.
pub(crate) async fn stream(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Query(params): Query<HashMap<String, String>>,
    ws: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Result<Response, ApiError> {
    let queue = requested_queue(&caller, &params)?;
    let window = batch_size(&params)?;
    let ws = ws.map_err(|r| ApiError::new(r.status(), "UpgradeRequired", r.body_text()))?;
    Ok(ws.on_upgrade(move |socket| run_stream(gw, caller, queue, window, socket)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamAck {
    ack: Vec<u64>,
}

// How long one broker wait lasts inside a stream session; bounds how quickly
// a closed socket is noticed.
const STREAM_POLL: Duration = Duration::from_millis(500);

async fn run_stream(gw: Arc<Gateway>, caller: Service, queue: QueueName, window: usize, mut socket: WebSocket) {
    let user = caller.username.clone();
    let mut inflight: BTreeSet<u64> = BTreeSet::new();
    let mut pending: Option<tokio::task::JoinHandle<Result<Vec<Delivery>, BrokerError>>> = None;
    loop {
        if pending.is_none() && inflight.len() < window {
            let (gw, user, queue, room) = (Arc::clone(&gw), user.clone(), queue.clone(), window - inflight.len());
            pending = Some(tokio::task::spawn_blocking(move || {
                gw.registry.broker().consume(&user, queue.as_str(), room, STREAM_POLL)
            }));
        }
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<StreamAck>(&text) {
                    Ok(req) => {
                        let (gw2, user2, queue2) = (Arc::clone(&gw), user.clone(), queue.clone());
                        let ids = req.ack.clone();
                        let res = tokio::task::spawn_blocking(move || {
                            gw2.registry.broker().ack_many(&user2, queue2.as_str(), &ids)
                        }).await;
                        match res {
                            Ok(Ok(n)) => {
                                for id in &req.ack {
                                    inflight.remove(id);
                                }
                                json!({ "acked": n })
                            }
                            Ok(Err(e)) => json!({ "error": ApiError::from(e).code, "detail": "ack rejected" }),
                            Err(e) => json!({ "error": "Internal", "detail": e.to_string() }),
                        }
                    }
                    Err(e) => json!({ "error": "BadRequest", "detail": e.to_string() }),
                };
                if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
                    break;
                }
            }
            done = async { pending.as_mut().expect("guarded").await }, if pending.is_some() => {
                pending = None;
                let deliveries = match done {
                    Ok(Ok(d)) => d,
                    Ok(Err(e)) => {
                        let _ = socket.send(Message::Text(json!({ "error": ApiError::from(e).code }).to_string().into())).await;
                        break;
                    }
                    Err(_) => break,
                };
                let mut closed = false;
                for d in deliveries {
                    inflight.insert(d.message_id);
                    if closed {
                        continue;
                    }
                    let text = serde_json::to_string(&WireMessage::from(d)).expect("message serializes");
                    closed = socket.send(Message::Text(text.into())).await.is_err();
                }
                if closed {
                    break;
                }
            }
        }
    }
    if let Some(handle) = pending {
        if let Ok(Ok(late)) = handle.await {
            inflight.extend(late.iter().map(|d| d.message_id));
        }
    }
    if !inflight.is_empty() {
        let ids: Vec<u64> = inflight.into_iter().collect();
        let _ = tokio::task::spawn_blocking(move || gw.registry.broker().release(&user, queue.as_str(), &ids)).await;
    }
}
