//! Route table and handlers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use super::catalog::{parse_range, Bbox, RegionQuery};
use super::{Gateway, GatewayError};
use crate::enactment::{BackendKind, Feeds, RunOptions};
use crate::graph::{GraphDocument, WorkflowGraph};
use crate::provenance::{download_script, parse_criteria, Criteria, LineageDirection, ProvDocument};
use crate::registry::{ComponentKind, ROOT};
use crate::seismo::load_ingested;
use crate::value::{decode_payload_bytes, DataUnit, Metadata};

type Shared = State<Arc<Gateway>>;
type ApiResult<T = Response> = Result<T, GatewayError>;

/// Longest a client may long-poll the event feed.
const MAX_WAIT_MS: u64 = 30_000;

pub(super) fn routes() -> Router<Arc<Gateway>> {
    Router::new()
        .route("/runs", get(list_runs).post(submit_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/outputs", get(run_outputs))
        .route("/runs/{id}/cancel", post(cancel_run))
        .route("/catalog/events", get(catalog_events))
        .route("/catalog/stations", get(catalog_stations))
        .route("/catalog/regions", get(catalog_regions))
        .route("/waveforms", get(waveforms))
        .route("/prov/runs", get(prov_runs))
        .route("/prov/runs/{id}", get(prov_run))
        .route("/prov/runs/{id}/export", get(prov_export))
        .route("/prov/runs/{id}/activities", get(prov_activities))
        .route("/prov/import", post(prov_import))
        .route("/prov/entities", get(prov_entities))
        .route("/prov/entity", get(prov_entity))
        .route("/prov/lineage", get(prov_lineage))
        .route("/prov/ancestor", get(prov_ancestor))
        .route("/downloads/script", post(download))
        .route("/blobs/{digest}", get(blob))
        .merge(registry_routes())
}

pub(super) fn registry_routes() -> Router<Arc<Gateway>> {
    Router::new()
        .route("/health", get(health))
        .route("/registry/workspaces", get(list_workspaces).post(create_workspace))
        .route("/registry/components", get(list_components).post(register_component))
        .route("/registry/resolve", get(resolve_component))
}

/// Compact JSON exactly as `serde_json::to_vec` writes it.
fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let body = serde_json::to_vec(value).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn ok<T: Serialize>(value: &T) -> ApiResult {
    Ok(json(StatusCode::OK, value))
}

fn criteria(q: Option<&str>) -> ApiResult<Criteria> {
    match q {
        None | Some("") => Ok(Criteria::new()),
        Some(text) => Ok(parse_criteria(text)?),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

async fn health() -> Response {
    json(StatusCode::OK, &serde_json::json!({"status": "ok"}))
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

/// A registry reference (`name@version`, `ws:name@version`) or an inline document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphRef {
    Registry(String),
    Inline(GraphDocument),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSubmission {
    pub graph_ref: GraphRef,
    /// Workspace that relative references resolve from; defaults to the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace: Option<String>,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_load: Option<f64>,
    /// Per-node parameter overrides.
    #[serde(default)]
    pub parameters: BTreeMap<String, Metadata>,
    #[serde(default = "yes")]
    pub provenance_on: bool,
    #[serde(default)]
    pub spill_on: bool,
    /// Units pushed into each feed.
    #[serde(default)]
    pub feeds: Feeds,
    /// Stored entities (e.g. ingested traces) pushed into each feed, in order.
    #[serde(default)]
    pub feed_entities: BTreeMap<String, Vec<String>>,
}

fn default_backend() -> BackendKind {
    BackendKind::Sequential
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Submitted {
    run_id: String,
}

fn apply_parameters(doc: &mut GraphDocument, params: &BTreeMap<String, Metadata>) -> ApiResult<()> {
    for (node, overrides) in params {
        let nd = doc
            .nodes
            .get_mut(node)
            .ok_or_else(|| GatewayError::Unprocessable(format!("parameters name unknown node `{node}`")))?;
        nd.params.extend(overrides.clone());
    }
    Ok(())
}

fn build_submission(gw: &Gateway, sub: &RunSubmission) -> ApiResult<(WorkflowGraph, Feeds)> {
    let ws = sub.workspace.as_deref().unwrap_or(ROOT);
    let reg = gw.registry();
    let (mut doc, resolve_from) = match &sub.graph_ref {
        GraphRef::Inline(doc) => (doc.clone(), ws.to_string()),
        GraphRef::Registry(r) => {
            let (rec, doc) = reg.graph_document(ws, r)?;
            (doc, rec.workspace_id)
        }
    };
    apply_parameters(&mut doc, &sub.parameters)?;
    let graph = doc.resolve(&reg.resolver(&resolve_from))?;
    let mut feeds = sub.feeds.clone();
    let prov = gw.provenance();
    for (feed, ids) in &sub.feed_entities {
        let units = feeds.entry(feed.clone()).or_default();
        for id in ids {
            let e = prov.store().entity(id).ok_or_else(|| GatewayError::NotFound(format!("unknown entity `{id}`")))?;
            let bytes = prov
                .blobs()
                .and_then(|b| b.get(&e.payload_digest).ok())
                .ok_or_else(|| GatewayError::NotFound(format!("payload of `{id}` is not stored")))?;
            let payload = decode_payload_bytes(&bytes).map_err(|err| GatewayError::Unprocessable(err.to_string()))?;
            units.push(DataUnit::with_metadata(payload, e.metadata));
        }
    }
    Ok((graph, feeds))
}

async fn submit_run(State(gw): Shared, body: Bytes) -> ApiResult {
    let sub: RunSubmission =
        serde_json::from_slice(&body).map_err(|e| GatewayError::Unprocessable(format!("run submission: {e}")))?;
    let (graph, feeds) = build_submission(&gw, &sub)?;
    let mut opts = RunOptions { provenance_on: sub.provenance_on, spill_on: sub.spill_on, max_load: sub.max_load, ..RunOptions::default() };
    if let Some(w) = sub.workers {
        opts.workers = w.max(1);
    }
    let enactor = gw.enactor().clone();
    let run_id = blocking(move || enactor.submit(&graph, sub.backend, opts, feeds)).await?;
    Ok(json(StatusCode::ACCEPTED, &Submitted { run_id }))
}

async fn list_runs(State(gw): Shared) -> ApiResult {
    let e = gw.enactor();
    let records: Vec<_> = e.run_ids().iter().filter_map(|id| e.record(id).ok()).collect();
    ok(&records)
}

async fn get_run(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    ok(&gw.enactor().record(&id)?)
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    /// Wait up to this long for a newer event.
    #[serde(default)]
    wait_ms: u64,
}

async fn run_events(State(gw): Shared, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult {
    let enactor = gw.enactor().clone();
    let wait = Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    let events = blocking(move || enactor.events_since(&id, q.since, wait)).await?;
    ok(&events)
}

async fn run_outputs(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    ok(&gw.enactor().outputs(&id)?)
}

async fn cancel_run(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    let enactor = gw.enactor().clone();
    ok(&blocking(move || enactor.cancel(&id)).await?)
}

// ---------------------------------------------------------------------------
// Catalog and waveforms
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CatalogQuery {
    bbox: Option<String>,
    region: Option<String>,
    time: Option<String>,
    mag: Option<String>,
}

fn region_of(gw: &Gateway, q: &CatalogQuery) -> ApiResult<Option<Bbox>> {
    match (&q.bbox, &q.region) {
        (Some(_), Some(_)) => Err(GatewayError::Unprocessable("give either bbox or region, not both".into())),
        (Some(b), None) => Ok(Some(Bbox::parse(b)?)),
        (None, Some(name)) => Ok(Some(gw.catalog().region(name)?)),
        (None, None) => Ok(None),
    }
}

async fn catalog_events(State(gw): Shared, Query(q): Query<CatalogQuery>) -> ApiResult {
    let query = RegionQuery {
        bbox: region_of(&gw, &q)?,
        time_range: q.time.as_deref().map(|t| parse_range(t, "time")).transpose()?,
        magnitude_range: q.mag.as_deref().map(|m| parse_range(m, "mag")).transpose()?,
    };
    ok(&gw.catalog().events(&query))
}

async fn catalog_stations(State(gw): Shared, Query(q): Query<CatalogQuery>) -> ApiResult {
    if q.time.is_some() || q.mag.is_some() {
        return Err(GatewayError::Unprocessable("stations accept only bbox or region".into()));
    }
    ok(&gw.catalog().stations(region_of(&gw, &q)?.as_ref()))
}

async fn catalog_regions(State(gw): Shared) -> ApiResult {
    ok(gw.catalog().regions())
}

#[derive(Debug, Deserialize)]
struct WaveformQuery {
    /// `NET.STA` or `NET.STA.CHA`
    sta: String,
    start: f64,
    end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WaveformDoc {
    pub entity_id: String,
    pub network: String,
    pub station: String,
    pub channel: String,
    pub start_time: f64,
    pub dt: f64,
    pub units: String,
    pub samples: Vec<f64>,
}

async fn waveforms(State(gw): Shared, Query(q): Query<WaveformQuery>) -> ApiResult {
    if !(q.start <= q.end) {
        return Err(GatewayError::Unprocessable(format!("start {} is after end {}", q.start, q.end)));
    }
    let prov = gw.provenance();
    let held: Vec<_> = prov
        .store()
        .query_entities(&Criteria::new())?
        .into_iter()
        .filter(|e| e.metadata.get("stage").and_then(|v| v.as_str()) == Some("raw"))
        .filter(|e| {
            let is = |k: &str| e.metadata.get(k).and_then(|v| v.as_str()) == Some(q.sta.as_str());
            is("station") || is("channel")
        })
        .collect();
    if held.is_empty() {
        return Err(GatewayError::NotFound(format!("no holdings for station `{}`", q.sta)));
    }
    let mut docs = Vec::new();
    for e in held {
        let trace = load_ingested(prov, &e.entity_id).map_err(|err| GatewayError::module(500, err.code(), err.to_string()))?;
        if let Some(t) = trace.trim(q.start, q.end) {
            docs.push(WaveformDoc {
                entity_id: e.entity_id,
                network: t.network,
                station: t.station,
                channel: t.channel,
                start_time: t.start_time,
                dt: t.dt,
                units: t.units,
                samples: t.samples,
            });
        }
    }
    if docs.is_empty() {
        return Err(GatewayError::OutOfRange(format!("[{}, {}] lies outside the holdings for `{}`", q.start, q.end, q.sta)));
    }
    ok(&docs)
}

// ---------------------------------------------------------------------------
// Provenance proxies
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CriteriaQuery {
    q: Option<String>,
}

async fn prov_runs(State(gw): Shared, Query(q): Query<CriteriaQuery>) -> ApiResult {
    ok(&gw.provenance().store().query_runs(&criteria(q.q.as_deref())?)?)
}

async fn prov_run(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    let run = gw.provenance().store().run(&id).ok_or_else(|| GatewayError::from(crate::provenance::ProvError::UnknownRun(id)))?;
    ok(&run)
}

async fn prov_export(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    let doc = gw.provenance().store().export_run(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc.to_canonical_json()).into_response())
}

async fn prov_activities(State(gw): Shared, Path(id): Path<String>) -> ApiResult {
    let store = gw.provenance().store();
    if store.run(&id).is_none() {
        return Err(crate::provenance::ProvError::UnknownRun(id).into());
    }
    ok(&store.activities_of_run(&id))
}

async fn prov_import(State(gw): Shared, body: String) -> ApiResult {
    let doc = ProvDocument::parse(&body)?;
    gw.provenance().store().import_run(&doc)?;
    Ok(json(StatusCode::CREATED, &Submitted { run_id: doc.run.run_id }))
}

async fn prov_entities(State(gw): Shared, Query(q): Query<CriteriaQuery>) -> ApiResult {
    ok(&gw.provenance().store().query_entities(&criteria(q.q.as_deref())?)?)
}

#[derive(Debug, Deserialize)]
struct EntityQuery {
    id: String,
}

async fn prov_entity(State(gw): Shared, Query(q): Query<EntityQuery>) -> ApiResult {
    let e = gw.provenance().store().entity(&q.id).ok_or_else(|| GatewayError::from(crate::provenance::ProvError::UnknownEntity(q.id)))?;
    ok(&e)
}

#[derive(Debug, Deserialize)]
struct LineageQuery {
    entity: String,
    #[serde(default = "ancestors")]
    direction: LineageDirection,
    #[serde(default = "one")]
    depth: usize,
}

fn ancestors() -> LineageDirection {
    LineageDirection::Ancestors
}

fn one() -> usize {
    1
}

async fn prov_lineage(State(gw): Shared, Query(q): Query<LineageQuery>) -> ApiResult {
    ok(&gw.provenance().store().trace_lineage(&q.entity, q.direction, q.depth)?)
}

#[derive(Debug, Deserialize)]
struct AncestorQuery {
    entity: String,
    q: Option<String>,
}

async fn prov_ancestor(State(gw): Shared, Query(q): Query<AncestorQuery>) -> ApiResult {
    ok(&gw.provenance().store().has_ancestor_matching(&q.entity, &criteria(q.q.as_deref())?)?)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ScriptRequest {
    /// Metadata criteria, as for `/prov/entities`.
    criteria: serde_json::Value,
}

async fn download(State(gw): Shared, body: Bytes) -> ApiResult {
    let req: ScriptRequest = if body.is_empty() {
        ScriptRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| GatewayError::Unprocessable(format!("script request: {e}")))?
    };
    let crit = match &req.criteria {
        serde_json::Value::Null => Criteria::new(),
        v => criteria(Some(&v.to_string()))?,
    };
    let entities = gw.provenance().store().query_entities(&crit)?;
    let script = download_script(&entities, gw.base_url());
    Ok(([(header::CONTENT_TYPE, "text/x-shellscript")], script).into_response())
}

async fn blob(State(gw): Shared, Path(digest): Path<String>) -> ApiResult {
    let bytes = gw
        .provenance()
        .blobs()
        .and_then(|b| b.get(&digest).ok())
        .ok_or_else(|| GatewayError::NotFound(format!("no blob `{digest}`")))?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

async fn list_workspaces(State(gw): Shared) -> ApiResult {
    ok(&gw.registry().workspaces())
}

#[derive(Debug, Deserialize)]
struct NewWorkspace {
    name: String,
    parent: Option<String>,
}

async fn create_workspace(State(gw): Shared, body: Bytes) -> ApiResult {
    let req: NewWorkspace = serde_json::from_slice(&body).map_err(|e| GatewayError::Unprocessable(e.to_string()))?;
    let w = gw.registry().create_workspace(&req.name, req.parent.as_deref())?;
    Ok(json(StatusCode::CREATED, &w))
}

#[derive(Debug, Deserialize)]
struct ComponentsQuery {
    ws: Option<String>,
    /// Whitespace-separated search terms; searching needs `ws`.
    q: Option<String>,
}

async fn list_components(State(gw): Shared, Query(q): Query<ComponentsQuery>) -> ApiResult {
    match (&q.ws, &q.q) {
        (Some(ws), Some(terms)) => {
            let terms: Vec<&str> = terms.split_whitespace().collect();
            ok(&gw.registry().search(ws, &terms)?)
        }
        (None, Some(_)) => Err(GatewayError::Unprocessable("search needs a workspace (ws)".into())),
        (ws, None) => ok(&gw.registry().components(ws.as_deref())?),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct NewComponent {
    workspace_id: String,
    kind: ComponentKind,
    name: String,
    /// Canonical text, or the document itself.
    body: serde_json::Value,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

async fn register_component(State(gw): Shared, body: Bytes) -> ApiResult {
    let req: NewComponent = serde_json::from_slice(&body).map_err(|e| GatewayError::Unprocessable(e.to_string()))?;
    let text = match req.body {
        serde_json::Value::String(s) => s,
        v => v.to_string(),
    };
    let rec = gw.registry().register_component(&req.workspace_id, req.kind, &req.name, &text, req.annotations)?;
    Ok(json(StatusCode::CREATED, &rec))
}

#[derive(Debug, Deserialize)]
struct ResolveQuery {
    ws: Option<String>,
    name: String,
    version: Option<u32>,
}

async fn resolve_component(State(gw): Shared, Query(q): Query<ResolveQuery>) -> ApiResult {
    ok(&gw.registry().resolve(q.ws.as_deref().unwrap_or(ROOT), &q.name, q.version)?)
}
