//! HTTP front door for the livestock event broker.
//!
//! Every operation is one route. Routes marked `auth` in [`ROUTES`] require
//! HTTP Basic credentials of a registered service.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::Request;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use leisa_core::broker::Broker;
use leisa_core::registry::RegistryConfig;
use leisa_core::{Registry, SchemaRegistry};
use serde::de::DeserializeOwned;

pub mod auth;
pub mod config;
pub mod error;
mod mappings;
pub mod messages;
mod services;

pub use config::{AdminConfig, GatewayConfig};
pub use error::ApiError;

/// Shared state behind every handler.
pub struct Gateway {
    pub registry: Registry,
    pub schemas: SchemaRegistry,
    request_seq: AtomicU64,
}

impl Gateway {
    /// Opens broker and registry under `config.storage_root`, loads schemas
    /// and creates the bootstrap admin if configured.
    pub fn open(config: &GatewayConfig) -> anyhow::Result<Arc<Self>> {
        let root = &config.storage_root;
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let broker = Arc::new(Broker::open(root.join("broker")).context("opening broker")?);
        let registry = Registry::open(
            &root.join("registry.db"),
            broker,
            RegistryConfig { hash_iterations: config.password_hash_iterations },
        )
        .context("opening registry")?;
        let schemas = match &config.schema_dir {
            Some(dir) => SchemaRegistry::load_dir(dir)?,
            None => SchemaRegistry::builtin(),
        };
        if let Some(admin) = &config.bootstrap_admin {
            registry.ensure_bootstrap_admin(&admin.username, &admin.password).context("creating bootstrap admin")?;
        }
        Ok(Arc::new(Self { registry, schemas, request_seq: AtomicU64::new(1) }))
    }

    fn next_request_id(&self) -> String {
        format!("req-{:08x}", self.request_seq.fetch_add(1, Ordering::Relaxed))
    }
}

/// One row per operation: method, path, whether credentials are required,
/// operation name.
pub const ROUTES: [(Method, &str, bool, &str); 16] = [
    (Method::POST, "/services", false, "ServiceRegistration"),
    (Method::POST, "/services/login", false, "ServiceLogin"),
    (Method::DELETE, "/services/{id}", true, "DeleteService"),
    (Method::GET, "/services/{id}", true, "FindService"),
    (Method::GET, "/services/all", true, "ListAllServices"),
    (Method::GET, "/services", true, "ListService"),
    (Method::POST, "/validate", false, "MessageValidator"),
    (Method::POST, "/publish/{eventType}", true, "PublishMessage"),
    (Method::PUT, "/services/{id}", true, "UpdateService"),
    (Method::POST, "/mappings", true, "SetQueueMapping"),
    (Method::GET, "/mappings", true, "GetQueueMapping"),
    (Method::PUT, "/mappings", true, "UpdateQueueMapping"),
    (Method::DELETE, "/mappings", true, "DeleteQueueMapping"),
    (Method::GET, "/consume", true, "ConsumeMessage"),
    (Method::POST, "/consume/ack", true, "ConsumeMessage"),
    (Method::GET, "/consume/stream", true, "ConsumeMessage"),
];

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/services", post(services::register).get(services::list))
        .route("/services/login", post(services::login))
        .route("/services/all", get(services::list_all))
        .route("/services/{id}", get(services::find).put(services::update).delete(services::delete))
        .route("/validate", post(messages::validate))
        .route("/publish/{eventType}", post(messages::publish))
        .route("/mappings", post(mappings::set).get(mappings::get).put(mappings::update).delete(mappings::delete))
        .route("/consume", get(messages::consume))
        .route("/consume/ack", post(messages::ack))
        .route("/consume/stream", get(messages::stream))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", "method not allowed on this route")
        })
        .layer(middleware::from_fn_with_state(Arc::clone(&gw), request_id))
        .with_state(gw)
}

async fn request_id(
    axum::extract::State(gw): axum::extract::State<Arc<Gateway>>,
    req: Request,
    next: Next,
) -> Response {
    let id = gw.next_request_id();
    let mut resp = error::REQUEST_ID.scope(id.clone(), next.run(req)).await;
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert("x-request-id", v);
    }
    resp
}

pub(crate) fn json_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    if let Err(e) = leisa_core::domain::parse_json(body) {
        return Err(e.into());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Runs registry/broker work off the async executor.
pub(crate) async fn blocking<T, E>(
    gw: &Arc<Gateway>,
    f: impl FnOnce(&Gateway) -> Result<T, E> + Send + 'static,
) -> Result<T, ApiError>
where
    T: Send + 'static,
    E: Into<ApiError> + Send + 'static,
{
    let gw = Arc::clone(gw);
    tokio::task::spawn_blocking(move || f(&gw)).await?.map_err(Into::into)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    gw: Arc<Gateway>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(gw)).with_graceful_shutdown(shutdown).await
}

/// A gateway running on its own runtime thread. Dropping it shuts it down.
pub struct RunningGateway {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningGateway {
    /// Opens storage per `config` and serves on `config.listen` (port 0 picks one).
    pub fn start(config: &GatewayConfig) -> anyhow::Result<Self> {
        let gateway = Gateway::open(config)?;
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(config.listen))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let gw = Arc::clone(&gateway);
        let thread = std::thread::Builder::new().name("leisa-gateway".into()).spawn(move || {
            let result = runtime.block_on(serve(listener, gw, async {
                let _ = stopped.await;
            }));
            if let Err(e) = result {
                log::error!("gateway stopped: {e}");
            }
            runtime.shutdown_timeout(std::time::Duration::from_secs(2));
        })?;
        Ok(Self { addr, gateway, stop: Some(stop), thread: Some(thread) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for RunningGateway {
    fn drop(&mut self) {
        self.stop_now();
    }
}
