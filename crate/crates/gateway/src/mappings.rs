use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::Json;
use leisa_core::{EventType, QueueMapping};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::auth::Authed;
use crate::error::ApiError;
use crate::{blocking, json_body, Gateway};

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MappingRequest {
    event_type: String,
    consumer_ids: Vec<u64>,
}

fn event_type(raw: String) -> Result<EventType, ApiError> {
    EventType::new(raw).map_err(ApiError::from)
}

pub(crate) async fn set(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    body: Bytes,
) -> Result<Json<Vec<QueueMapping>>, ApiError> {
    let req: MappingRequest = json_body(&body)?;
    let et = event_type(req.event_type)?;
    let rows =
        blocking(&gw, move |gw| gw.registry.routing().set_queue_mapping(&caller, &et, &req.consumer_ids)).await?;
    Ok(Json(rows))
}

pub(crate) async fn get(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
) -> Result<Json<Vec<QueueMapping>>, ApiError> {
    Ok(Json(blocking(&gw, move |gw| gw.registry.routing().get_queue_mapping(&caller)).await?))
}

pub(crate) async fn update(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    body: Bytes,
) -> Result<Json<Vec<QueueMapping>>, ApiError> {
    let req: MappingRequest = json_body(&body)?;
    let et = event_type(req.event_type)?;
    let rows =
        blocking(&gw, move |gw| gw.registry.routing().update_queue_mapping(&caller, &et, &req.consumer_ids)).await?;
    Ok(Json(rows))
}

pub(crate) async fn delete(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let et = params.get("eventType").cloned().map(event_type).transpose()?;
    let n = blocking(&gw, move |gw| gw.registry.routing().delete_queue_mapping(&caller, et.as_ref())).await?;
    Ok(Json(json!({ "deleted": n })))
}
