use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use base64::Engine;
use leisa_core::Service;

use crate::error::ApiError;
use crate::Gateway;

/// Splits an `Authorization: Basic ...` value into username and password.
pub fn parse_basic(value: &str) -> Option<(String, String)> {
    let (scheme, encoded) = value.trim().split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let decoded = base64::engine::general_purpose::STANDARD.decode(encoded.trim()).ok()?;
    let decoded = String::from_utf8(decoded).ok()?;
    let (user, pass) = decoded.split_once(':')?;
    Some((user.to_owned(), pass.to_owned()))
}

pub fn basic_header(username: &str, password: &str) -> String {
    format!("Basic {}", base64::engine::general_purpose::STANDARD.encode(format!("{username}:{password}")))
}

async fn login(gw: &Arc<Gateway>, parts: &Parts) -> Result<Option<Service>, ApiError> {
    let Some(value) = parts.headers.get(AUTHORIZATION) else {
        return Ok(None);
    };
    let (user, pass) = value
        .to_str()
        .ok()
        .and_then(parse_basic)
        .ok_or_else(|| ApiError::unauthenticated("malformed Basic credentials"))?;
    let gw = Arc::clone(gw);
    let service = tokio::task::spawn_blocking(move || gw.registry.login(&user, &pass)).await?;
    match service {
        Ok(s) => Ok(Some(s)),
        Err(leisa_core::RegistryError::InvalidCredentials) => Err(ApiError::unauthenticated("invalid credentials")),
        Err(e) => Err(e.into()),
    }
}

/// The caller, authenticated with HTTP Basic. Rejects with 401 otherwise.
pub struct Authed(pub Service);

impl FromRequestParts<Arc<Gateway>> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, gw: &Arc<Gateway>) -> Result<Self, ApiError> {
        login(gw, parts).await?.map(Authed).ok_or_else(|| ApiError::unauthenticated("credentials required"))
    }
}

/// Credentials are optional, but if present they must be valid.
pub struct MaybeAuthed(pub Option<Service>);

impl FromRequestParts<Arc<Gateway>> for MaybeAuthed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, gw: &Arc<Gateway>) -> Result<Self, ApiError> {
        login(gw, parts).await.map(MaybeAuthed)
    }
}
