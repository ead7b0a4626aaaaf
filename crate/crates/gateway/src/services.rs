use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::Json;
use leisa_core::{Service, ServiceRole};
use serde::Deserialize;

use crate::auth::{Authed, MaybeAuthed};
use crate::error::ApiError;
use crate::{blocking, json_body, Gateway};

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RegisterRequest {
    username: String,
    password: String,
    role: ServiceRole,
    #[serde(default)]
    is_admin: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginRequest {
    username: String,
    password: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateRequest {
    username: Option<String>,
    password: Option<String>,
}

fn service_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse().map_err(|_| ApiError::bad_request(format!("`{raw}` is not a service id")))
}

pub(crate) async fn register(
    State(gw): State<Arc<Gateway>>,
    MaybeAuthed(caller): MaybeAuthed,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: RegisterRequest = json_body(&body)?;
    let service = blocking(&gw, move |gw| {
        gw.registry.register_service(caller.as_ref(), &req.username, &req.password, req.role, req.is_admin)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(service)))
}

pub(crate) async fn login(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Json<Service>, ApiError> {
    let req: LoginRequest = json_body(&body)?;
    Ok(Json(blocking(&gw, move |gw| gw.registry.login(&req.username, &req.password)).await?))
}

pub(crate) async fn delete(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let id = service_id(&id)?;
    blocking(&gw, move |gw| gw.registry.delete_service(&caller, id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

pub(crate) async fn find(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Path(id): Path<String>,
) -> Result<Json<Service>, ApiError> {
    let id = service_id(&id)?;
    Ok(Json(blocking(&gw, move |gw| gw.registry.find_service(&caller, id)).await?))
}

pub(crate) async fn list_all(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
) -> Result<Json<Vec<Service>>, ApiError> {
    Ok(Json(blocking(&gw, move |gw| gw.registry.list_all_services(&caller)).await?))
}

pub(crate) async fn list(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
) -> Result<Json<Vec<Service>>, ApiError> {
    Ok(Json(blocking(&gw, move |gw| gw.registry.list_services(&caller)).await?))
}

pub(crate) async fn update(
    State(gw): State<Arc<Gateway>>,
    Authed(caller): Authed,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Service>, ApiError> {
    let id = service_id(&id)?;
    let req: UpdateRequest = json_body(&body)?;
    let updated = blocking(&gw, move |gw| {
        gw.registry.update_service(&caller, id, req.username.as_deref(), req.password.as_deref())
    })
    .await?;
    Ok(Json(updated))
}
