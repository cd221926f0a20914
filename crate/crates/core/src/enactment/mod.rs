//! Running workflow graphs: planning, three interchangeable backends,
//! run monitoring and cancellation.
//!
//! An [`Enactor`] owns every run it starts. Runs execute on a background
//! thread; callers poll or block on the event feed and may cancel at any time.

mod exec;
mod multiprocess;
mod plan;
mod sequential;
mod spill;
mod threaded;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::BlobStore;
use crate::clock::Timestamp;
use crate::graph::{GraphError, WorkflowGraph};
use crate::pe::PeLibrary;
use crate::provenance::{ProvError, Provenance, RunSummary};
use crate::value::{DataUnit, Metadata, Value};

pub use multiprocess::{resolve_worker_exe, run_worker};
pub use plan::{cut_of, exhaustive_min_cut, partition_graph, unit_weights, ExecutionPlan};

/// Arrays larger than this travel as blob references.
pub const BLOB_THRESHOLD_BYTES: usize = 1 << 20;

/// Default limit on bytes a single run may spill to disk.
pub const DEFAULT_SPILL_QUOTA: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum EnactError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} already finished")]
    AlreadyTerminal(String),
    #[error("infeasible load: {0}")]
    InfeasibleLoad(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("plan does not fit the graph: {0}")]
    BadPlan(String),
    #[error("feed `{0}` is not declared by the graph")]
    UnknownFeed(String),
    #[error("PE `{instance}`: {message}")]
    PeFailure { instance: String, message: String },
    #[error("spill storage exhausted: {0}")]
    SpillExhausted(String),
    #[error("worker process: {0}")]
    Worker(String),
    #[error(transparent)]
    Prov(#[from] ProvError),
}

impl EnactError {
    pub fn code(&self) -> &'static str {
        match self {
            EnactError::Graph(g) => g.code(),
            EnactError::UnknownRun(_) => "UnknownRun",
            EnactError::AlreadyTerminal(_) => "AlreadyTerminal",
            EnactError::InfeasibleLoad(_) => "InfeasibleLoad",
            EnactError::EmptyGraph => "EmptyGraph",
            EnactError::BadPlan(_) => "BadPlan",
            EnactError::UnknownFeed(_) => "UnknownFeed",
            EnactError::PeFailure { .. } => "PEFailure",
            EnactError::SpillExhausted(_) => "SpillExhausted",
            EnactError::Worker(_) => "WorkerFailure",
            EnactError::Prov(p) => p.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BackendKind {
    Sequential,
    Threaded,
    Multiprocess,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::Sequential, BackendKind::Threaded, BackendKind::Multiprocess];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Sequential => "sequential",
            BackendKind::Threaded => "threaded",
            BackendKind::Multiprocess => "multiprocess",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackendKind::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown backend `{s}` (sequential, threaded, multiprocess)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RunStatus {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::Failed | RunStatus::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
            RunStatus::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ErrorEntry {
    pub pe_instance: String,
    pub message: String,
    /// Sequence number of the unit being processed; 0 for start and finish hooks.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub run_id: String,
    pub graph_ref: String,
    pub backend: BackendKind,
    pub plan: ExecutionPlan,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    pub activity_ids: Vec<String>,
    pub output_refs: BTreeMap<String, Vec<String>>,
    pub error_log: Vec<ErrorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RunEventKind {
    StateChange,
    UnitProcessed,
    Error,
    TriggerFired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunEvent {
    pub run_id: String,
    pub kind: RunEventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pe_instance: Option<String>,
    pub seq: u64,
    pub timestamp: Timestamp,
    pub detail: Metadata,
}

impl RunEvent {
    /// The new status of a state change event.
    pub fn state(&self) -> Option<&str> {
        match self.kind {
            RunEventKind::StateChange => self.detail.get("status").and_then(Value::as_str),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Load limit per worker; defaults to an even split of the node weights.
    pub max_load: Option<f64>,
    pub node_weights: BTreeMap<String, f64>,
    pub plan: Option<ExecutionPlan>,
    pub provenance_on: bool,
    pub spill_on: bool,
    pub spill_quota: u64,
    pub agent: String,
    pub run_id: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 2,
            max_load: None,
            node_weights: BTreeMap::new(),
            plan: None,
            provenance_on: true,
            spill_on: false,
            spill_quota: DEFAULT_SPILL_QUOTA,
            agent: "seisflow".into(),
            run_id: None,
        }
    }
}

/// External input: feed name to the units pushed into it, in order.
pub type Feeds = BTreeMap<String, Vec<DataUnit>>;

/// Shared, observable state of one run.
pub(crate) struct RunHandle {
    pub(crate) run_id: String,
    record: Mutex<RunRecord>,
    events: Mutex<Vec<RunEvent>>,
    changed: Condvar,
    stop: AtomicBool,
    cancel_requested: AtomicBool,
    failed: AtomicBool,
    pub(crate) processed: AtomicU64,
    outputs: Mutex<BTreeMap<String, Vec<DataUnit>>>,
    mirror: Option<Mutex<File>>,
}

impl RunHandle {
    pub(crate) fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub(crate) fn request_cancel(&self) {
        self.cancel_requested.store(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
    }

    pub(crate) fn push_event(&self, kind: RunEventKind, pe: Option<&str>, timestamp: Timestamp, detail: Metadata) {
        let mut events = self.events.lock().unwrap();
        // producers race for the lock; keep the feed's clock monotone
        let timestamp = events.last().map_or(timestamp, |last| timestamp.max(last.timestamp));
        let ev = RunEvent {
            run_id: self.run_id.clone(),
            kind,
            pe_instance: pe.map(str::to_string),
            seq: events.len() as u64 + 1,
            timestamp,
            detail,
        };
        if let Some(m) = &self.mirror {
            if let Ok(line) = serde_json::to_string(&ev) {
                let _ = writeln!(m.lock().unwrap(), "{line}");
            }
        }
        events.push(ev);
        self.changed.notify_all();
    }

    /// Fail-fast: the first error stops the whole run.
    pub(crate) fn fail(&self, entry: ErrorEntry, timestamp: Timestamp) {
        let first = !self.failed.swap(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
        let detail: Metadata = [
            ("message".to_string(), Value::from(entry.message.as_str())),
            ("seq".to_string(), Value::Int(entry.seq as i64)),
        ]
        .into();
        self.push_event(RunEventKind::Error, Some(&entry.pe_instance), timestamp, detail);
        if first {
            self.record.lock().unwrap().error_log.push(entry);
        }
    }

    pub(crate) fn add_activity(&self, id: String) {
        self.record.lock().unwrap().activity_ids.push(id);
    }

    pub(crate) fn add_output(&self, port: &str, unit: DataUnit) {
        if let Some(id) = &unit.prov_id {
            self.record.lock().unwrap().output_refs.entry(port.to_string()).or_default().push(id.clone());
        }
        self.outputs.lock().unwrap().entry(port.to_string()).or_default().push(unit);
    }

    fn set_status(&self, status: RunStatus, at: Timestamp) {
        {
            let mut r = self.record.lock().unwrap();
            r.status = status;
            match status {
                RunStatus::Running => r.started_at = Some(at),
                s if s.is_terminal() => r.ended_at = Some(at),
                _ => {}
            }
        }
        let detail = [("status".to_string(), Value::from(status.as_str()))].into();
        self.push_event(RunEventKind::StateChange, None, at, detail);
    }

    fn snapshot(&self) -> RunRecord {
        self.record.lock().unwrap().clone()
    }

    fn wait_terminal(&self, timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut events = self.events.lock().unwrap();
        loop {
            if self.record.lock().unwrap().status.is_terminal() {
                return true;
            }
            match deadline {
                None => events = self.changed.wait(events).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return false;
                    }
                    events = self.changed.wait_timeout(events, d - now).unwrap().0;
                }
            }
        }
    }
}

/// Starts, tracks and cancels runs.
pub struct Enactor {
    library: Arc<PeLibrary>,
    prov: Arc<Provenance>,
    blobs: Arc<BlobStore>,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    counter: AtomicU64,
    event_log: Option<PathBuf>,
    worker_exe: Option<PathBuf>,
}

impl Enactor {
    pub fn new(prov: Provenance) -> Self {
        Self::shared(Arc::new(prov))
    }

    /// Share a provenance service with other components (gateway, CLI).
    pub fn shared(prov: Arc<Provenance>) -> Self {
        let blobs = prov.blobs().cloned().unwrap_or_else(|| Arc::new(BlobStore::in_memory()));
        Enactor {
            library: Arc::new(PeLibrary::builtin()),
            prov,
            blobs,
            runs: Mutex::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
            event_log: None,
            worker_exe: None,
        }
    }

    /// In-memory provenance and blobs.
    pub fn in_memory() -> Self {
        Self::new(Provenance::in_memory().with_blobs(Arc::new(BlobStore::in_memory())))
    }

    pub fn with_library(mut self, library: PeLibrary) -> Self {
        self.library = Arc::new(library);
        self
    }

    /// Mirror every run event as one JSON line to `<dir>/<runId>.events.jsonl`.
    pub fn with_event_log(mut self, dir: impl Into<PathBuf>) -> Self {
        self.event_log = Some(dir.into());
        self
    }

    pub fn with_worker_exe(mut self, exe: impl Into<PathBuf>) -> Self {
        self.worker_exe = Some(exe.into());
        self
    }

    pub fn provenance(&self) -> &Arc<Provenance> {
        &self.prov
    }

    pub fn blobs(&self) -> &Arc<BlobStore> {
        &self.blobs
    }

    pub fn library(&self) -> &PeLibrary {
        &self.library
    }

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, EnactError> {
        self.runs.lock().unwrap().get(run_id).cloned().ok_or_else(|| EnactError::UnknownRun(run_id.to_string()))
    }

    fn plan_for(&self, graph: &WorkflowGraph, backend: BackendKind, opts: &RunOptions) -> Result<ExecutionPlan, EnactError> {
        let mut weights = unit_weights(graph);
        weights.extend(opts.node_weights.iter().filter(|(k, _)| graph.node(k).is_some()).map(|(k, v)| (k.clone(), *v)));
        if let Some(p) = &opts.plan {
            p.check(graph, &weights)?;
            return Ok(p.clone());
        }
        if backend == BackendKind::Sequential || opts.workers <= 1 {
            return Ok(ExecutionPlan::from_assignment(
                graph,
                1,
                graph.nodes().keys().map(|k| (k.clone(), 0)).collect(),
                &weights,
            ));
        }
        let total: f64 = weights.values().sum();
        let max_load = opts.max_load.unwrap_or_else(|| {
            let even = (total / opts.workers as f64).ceil();
            even.max(weights.values().cloned().fold(0.0, f64::max))
        });
        partition_graph(graph, opts.workers, &weights, max_load)
    }

    fn fresh_run_id(&self, graph_ref: &str) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
            let id = format!("run-{}-{n:04}", &graph_ref[..8.min(graph_ref.len())]);
            if self.prov.store().run(&id).is_none() && !self.runs.lock().unwrap().contains_key(&id) {
                return id;
            }
        }
    }

    /// Create a pending run and execute it on a background thread.
    pub fn submit(
        &self,
        graph: &WorkflowGraph,
        backend: BackendKind,
        opts: RunOptions,
        feeds: Feeds,
    ) -> Result<String, EnactError> {
        let flat = graph.flatten();
        for name in feeds.keys() {
            if !flat.graph.feeds().contains_key(name) {
                return Err(EnactError::UnknownFeed(name.clone()));
            }
        }
        let plan = self.plan_for(&flat.graph, backend, &opts)?;
        let graph_ref = graph.content_hash();
        let run_id = match &opts.run_id {
            Some(id) if self.runs.lock().unwrap().contains_key(id) || self.prov.store().run(id).is_some() => {
                return Err(EnactError::Prov(ProvError::DuplicateId(id.clone())))
            }
            Some(id) => id.clone(),
            None => self.fresh_run_id(&graph_ref),
        };
        let mut execs = BTreeMap::new();
        if backend != BackendKind::Multiprocess {
            for (id, node) in flat.graph.nodes() {
                execs.insert(id.clone(), exec::NodeExec::new(&self.library, &run_id, id, node, Some(self.blobs.clone()))?);
            }
        } else {
            for (id, node) in flat.graph.nodes() {
                exec::check_instantiable(&self.library, id, node)?;
            }
        }
        let mirror = match &self.event_log {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| EnactError::Worker(e.to_string()))?;
                let f = File::create(event_log_path(dir, &run_id))
                    .map_err(|e| EnactError::Worker(e.to_string()))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        let handle = Arc::new(RunHandle {
            run_id: run_id.clone(),
            record: Mutex::new(RunRecord {
                run_id: run_id.clone(),
                graph_ref: graph_ref.clone(),
                backend,
                plan,
                status: RunStatus::Pending,
                started_at: None,
                ended_at: None,
                activity_ids: Vec::new(),
                output_refs: BTreeMap::new(),
                error_log: Vec::new(),
            }),
            events: Mutex::new(Vec::new()),
            changed: Condvar::new(),
            stop: AtomicBool::new(false),
            cancel_requested: AtomicBool::new(false),
            failed: AtomicBool::new(false),
            processed: AtomicU64::new(0),
            outputs: Mutex::new(BTreeMap::new()),
            mirror,
        });
        self.runs.lock().unwrap().insert(run_id.clone(), handle.clone());

        let prov = if opts.provenance_on { Some(self.prov.clone()) } else { None };
        let clock_prov = self.prov.clone();
        if let Some(p) = &prov {
            p.store().begin_run(RunSummary {
                run_id: run_id.clone(),
                agent_id: opts.agent.clone(),
                graph_ref,
                backend: backend.to_string(),
                status: "pending".into(),
                started_at: clock_prov.now(),
                ended_at: None,
                metadata: [("workers".to_string(), Value::Int(opts.workers as i64))].into(),
            })?;
        }
        let ctx = exec::RunContext {
            run_id: run_id.clone(),
            prov,
            clock: clock_prov,
            blobs: self.blobs.clone(),
            handle: handle.clone(),
            output_alias: flat.output_alias.clone(),
            graph_outputs: flat.graph.open_outputs().iter().map(|p| p.addr()).collect(),
            spill_on: opts.spill_on,
            spill_quota: opts.spill_quota,
            spilled: AtomicU64::new(0),
        };
        let worker_exe = self.worker_exe.clone();
        let graph = flat.graph;
        std::thread::Builder::new()
            .name(format!("run {run_id}"))
            .spawn(move || run_to_end(ctx, graph, backend, execs, feeds, worker_exe))
            .map_err(|e| EnactError::Worker(e.to_string()))?;
        Ok(run_id)
    }

    /// Run to completion and return the final record.
    pub fn execute(
        &self,
        graph: &WorkflowGraph,
        backend: BackendKind,
        opts: RunOptions,
        feeds: Feeds,
    ) -> Result<RunRecord, EnactError> {
        let id = self.submit(graph, backend, opts, feeds)?;
        self.wait(&id)
    }

    pub fn wait(&self, run_id: &str) -> Result<RunRecord, EnactError> {
        let h = self.handle(run_id)?;
        h.wait_terminal(None);
        Ok(h.snapshot())
    }

    pub fn wait_timeout(&self, run_id: &str, timeout: Duration) -> Result<Option<RunRecord>, EnactError> {
        let h = self.handle(run_id)?;
        Ok(h.wait_terminal(Some(timeout)).then(|| h.snapshot()))
    }

    pub fn record(&self, run_id: &str) -> Result<RunRecord, EnactError> {
        Ok(self.handle(run_id)?.snapshot())
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.runs.lock().unwrap().keys().cloned().collect()
    }

    /// Units that reached graph outputs, keyed by output port.
    pub fn outputs(&self, run_id: &str) -> Result<BTreeMap<String, Vec<DataUnit>>, EnactError> {
        Ok(self.handle(run_id)?.outputs.lock().unwrap().clone())
    }

    /// Count of PE invocations on input units so far.
    pub fn processed_units(&self, run_id: &str) -> Result<u64, EnactError> {
        Ok(self.handle(run_id)?.processed.load(Ordering::SeqCst))
    }

    /// All events so far, in order.
    pub fn monitor(&self, run_id: &str) -> Result<Vec<RunEvent>, EnactError> {
        Ok(self.handle(run_id)?.events.lock().unwrap().clone())
    }

    /// Events with `seq > after`, waiting up to `timeout` for at least one.
    pub fn events_since(&self, run_id: &str, after: u64, timeout: Duration) -> Result<Vec<RunEvent>, EnactError> {
        let h = self.handle(run_id)?;
        let deadline = Instant::now() + timeout;
        let mut events = h.events.lock().unwrap();
        loop {
            if events.len() as u64 > after || h.record.lock().unwrap().status.is_terminal() {
                return Ok(events.iter().skip(after as usize).cloned().collect());
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            events = h.changed.wait_timeout(events, deadline - now).unwrap().0;
        }
    }

    /// Stop a pending or running run; returns once the run has wound down.
    pub fn cancel(&self, run_id: &str) -> Result<RunRecord, EnactError> {
        let h = self.handle(run_id)?;
        if h.snapshot().status.is_terminal() {
            return Err(EnactError::AlreadyTerminal(run_id.to_string()));
        }
        h.request_cancel();
        h.wait_terminal(None);
        Ok(h.snapshot())
    }
}

fn run_to_end(
    ctx: exec::RunContext,
    graph: WorkflowGraph,
    backend: BackendKind,
    execs: BTreeMap<String, exec::NodeExec>,
    feeds: Feeds,
    worker_exe: Option<PathBuf>,
) {
    let h = ctx.handle.clone();
    h.set_status(RunStatus::Running, ctx.now());
    if let Some(p) = &ctx.prov {
        let _ = p.store().update_run(&ctx.run_id, "running", None);
    }
    let feeds = ctx.prepare_feeds(&graph, feeds);
    if !h.stopped() {
        match backend {
            BackendKind::Sequential => sequential::run(&ctx, &graph, execs, feeds),
            BackendKind::Threaded => threaded::run(&ctx, &graph, execs, feeds),
            BackendKind::Multiprocess => {
                let plan = h.snapshot().plan;
                if let Err(e) = multiprocess::run(&ctx, &graph, &plan, feeds, worker_exe.as_deref()) {
                    ctx.fail_run("coordinator", &e.to_string(), 0);
                }
            }
        }
    }
    let status = if h.failed.load(Ordering::SeqCst) {
        RunStatus::Failed
    } else if h.cancel_requested.load(Ordering::SeqCst) {
        RunStatus::Cancelled
    } else {
        RunStatus::Completed
    };
    let at = ctx.now();
    if let Some(p) = &ctx.prov {
        let _ = p.store().update_run(&ctx.run_id, status.as_str(), Some(at));
    }
    h.set_status(status, at);
}

/// Run one graph on a fresh in-memory enactor; convenient for tests and tools.
pub fn execute_graph(
    graph: &WorkflowGraph,
    backend: BackendKind,
    opts: RunOptions,
    feeds: Feeds,
) -> Result<(RunRecord, BTreeMap<String, Vec<DataUnit>>), EnactError> {
    let e = Enactor::in_memory();
    let rec = e.execute(graph, backend, opts, feeds)?;
    let out = e.outputs(&rec.run_id)?;
    Ok((rec, out))
}

/// Where the event mirror of a run is written.
pub fn event_log_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.events.jsonl"))
}
