//! HTTP facade over the enactor, provenance store, registry and catalogs.
//!
//! Every body is JSON except blob downloads and generated scripts; errors
//! are `{"code": ..., "message": ...}`. Requests other than GET/HEAD need a
//! bearer token from the configured token file, checked before any handler
//! runs.

mod catalog;
mod routes;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{parse_range, Bbox, Catalog, RegionQuery};
pub use routes::{GraphRef, RunSubmission, WaveformDoc};

use crate::datadir::DataDir;
use crate::enactment::{EnactError, Enactor};
use crate::graph::GraphError;
use crate::provenance::{ProvError, Provenance};
use crate::registry::{Registry, RegistryError};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8470";
pub const DEFAULT_DATA_DIR: &str = "seisflow-data";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    OutOfRange(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    /// An error from an underlying module, already mapped to a status.
    #[error("{message}")]
    Module { status: u16, code: &'static str, message: String },
}

impl GatewayError {
    pub fn status(&self) -> StatusCode {
        match self {
            GatewayError::Unauthorized => StatusCode::UNAUTHORIZED,
            GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
            GatewayError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            GatewayError::OutOfRange(_) => StatusCode::RANGE_NOT_SATISFIABLE,
            GatewayError::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
            GatewayError::Module { status, .. } => {
                StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
            }
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Unauthorized => "Unauthorized",
            GatewayError::NotFound(_) => "NotFound",
            GatewayError::Unprocessable(_) => "Unprocessable",
            GatewayError::OutOfRange(_) => "OutOfRange",
            GatewayError::Config(_) => "Config",
            GatewayError::Module { code, .. } => code,
        }
    }

    fn module(status: u16, code: &'static str, message: String) -> Self {
        GatewayError::Module { status, code, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().to_string(), message: self.to_string() };
        (self.status(), axum::Json(body)).into_response()
    }
}

impl From<ProvError> for GatewayError {
    fn from(e: ProvError) -> Self {
        let status = match &e {
            ProvError::UnknownRun(_) | ProvError::UnknownEntity(_) | ProvError::UnknownActivity(_) => 404,
            ProvError::DuplicateId(_) | ProvError::LineageCycle { .. } => 409,
            ProvError::Io(_) | ProvError::CorruptLog { .. } | ProvError::ShipFailed { .. } => 500,
            _ => 422,
        };
        GatewayError::module(status, e.code(), e.to_string())
    }
}

impl From<RegistryError> for GatewayError {
    fn from(e: RegistryError) -> Self {
        let status = match &e {
            RegistryError::UnknownParent(_) | RegistryError::UnknownWorkspace(_) | RegistryError::NotFound(_) => 404,
            RegistryError::DuplicateName(_) => 409,
            RegistryError::MalformedBody { .. }
            | RegistryError::BadName(_)
            | RegistryError::BadReference(_)
            | RegistryError::WrongKind { .. } => 422,
            RegistryError::Io(_) | RegistryError::Corrupt(_) => 500,
        };
        GatewayError::module(status, e.code(), e.to_string())
    }
}

impl From<EnactError> for GatewayError {
    fn from(e: EnactError) -> Self {
        let status = match &e {
            EnactError::UnknownRun(_) => 404,
            EnactError::AlreadyTerminal(_) => 409,
            EnactError::Worker(_) | EnactError::Prov(_) => 500,
            _ => 422,
        };
        GatewayError::module(status, e.code(), e.to_string())
    }
}

impl From<GraphError> for GatewayError {
    fn from(e: GraphError) -> Self {
        GatewayError::module(422, e.code(), e.to_string())
    }
}

/// Settings from a JSON config document, overridable by `GATEWAY_ADDR`,
/// `GATEWAY_DATA_DIR` and `GATEWAY_TOKENS` (path of the token file).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GatewayConfig {
    pub addr: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub token_file: Option<PathBuf>,
    /// Directory with `events.json`, `stations.json`, `regions.json`.
    pub fixtures_dir: Option<PathBuf>,
    /// Public URL used in generated download scripts.
    pub base_url: Option<String>,
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply overrides from an environment lookup.
    pub fn with_env(mut self, var: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(a) = var("GATEWAY_ADDR") {
            self.addr = Some(a);
        }
        if let Some(d) = var("GATEWAY_DATA_DIR") {
            self.data_dir = Some(d.into());
        }
        if let Some(t) = var("GATEWAY_TOKENS") {
            self.token_file = Some(t.into());
        }
        self
    }

    pub fn addr(&self) -> &str {
        self.addr.as_deref().unwrap_or(DEFAULT_ADDR)
    }
}

/// One token per line; blank lines and `#` comments are ignored.
pub fn read_tokens(path: &Path) -> Result<HashSet<String>, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_string).collect())
}

/// Shared state behind every route.
pub struct Gateway {
    enactor: Arc<Enactor>,
    registry: Arc<Registry>,
    catalog: Catalog,
    tokens: HashSet<String>,
    base_url: String,
}

impl Gateway {
    pub fn new(enactor: Arc<Enactor>, registry: Arc<Registry>, catalog: Catalog, tokens: HashSet<String>) -> Self {
        Gateway { enactor, registry, catalog, tokens, base_url: format!("http://{DEFAULT_ADDR}") }
    }

    /// In-memory stores and builtin fixtures.
    pub fn in_memory(tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(
            Arc::new(Enactor::in_memory()),
            Arc::new(Registry::in_memory()),
            Catalog::builtin(),
            tokens.into_iter().map(Into::into).collect(),
        )
    }

    /// Persistent stores under the configured data directory.
    pub fn open(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let dir = DataDir::new(config.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)));
        let cfg = |e: crate::Error| GatewayError::Config(e.to_string());
        let enactor = dir.open_enactor(None).map_err(cfg)?;
        let registry = dir.open_registry().map_err(cfg)?;
        let catalog = match &config.fixtures_dir {
            Some(d) => Catalog::from_dir(d)?,
            None => Catalog::builtin(),
        };
        let tokens = match &config.token_file {
            Some(p) => read_tokens(p)?,
            None => HashSet::new(),
        };
        let mut g = Self::new(Arc::new(enactor), Arc::new(registry), catalog, tokens);
        g.base_url = config.base_url.clone().unwrap_or_else(|| format!("http://{}", config.addr()));
        Ok(g)
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into();
        self
    }

    pub fn enactor(&self) -> &Arc<Enactor> {
        &self.enactor
    }

    pub fn provenance(&self) -> &Arc<Provenance> {
        self.enactor.provenance()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn authorized(&self, header_value: Option<&str>) -> bool {
        header_value
            .and_then(|h| h.strip_prefix("Bearer "))
            .is_some_and(|t| self.tokens.contains(t.trim()))
    }

    pub fn router(self: Arc<Self>) -> Router {
        routes::routes().layer(middleware::from_fn_with_state(self.clone(), require_token)).with_state(self)
    }

    /// Only `/health` and the `/registry/...` routes, with the same token rule.
    pub fn registry_router(self: Arc<Self>) -> Router {
        routes::registry_routes().layer(middleware::from_fn_with_state(self.clone(), require_token)).with_state(self)
    }
}

async fn require_token(State(gw): State<Arc<Gateway>>, req: Request, next: Next) -> Response {
    let read_only = matches!(*req.method(), Method::GET | Method::HEAD | Method::OPTIONS);
    if !read_only {
        let h = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
        if !gw.authorized(h) {
            return GatewayError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

/// Serve `router` until ctrl-c.
pub async fn serve(router: Router, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
