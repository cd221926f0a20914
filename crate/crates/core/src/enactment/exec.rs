//! What every backend does around a PE call: blob handling, sequence numbers,
//! deterministic entity ids, provenance capture, events and trigger reactions.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EnactError, ErrorEntry, Feeds, RunEventKind, RunHandle, BLOB_THRESHOLD_BYTES};
use crate::blob::BlobStore;
use crate::clock::Timestamp;
use crate::graph::{Node, PeBody, WorkflowGraph};
use crate::pe::{Emitter, PeLibrary, ProcessingElement};
use crate::provenance::{ActivityInput, Provenance, StepOutput, TriggerAction};
use crate::value::{bytes_to_f64s, f64s_to_bytes, BlobRef, DataUnit, Metadata, Payload, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub(crate) enum Phase {
    Start,
    Process,
    Finish,
}

pub(crate) enum Call<'a> {
    Start,
    Process { port: &'a str, unit: &'a DataUnit },
    Finish,
}

#[derive(Debug, Clone)]
pub(crate) struct Emitted {
    pub port: String,
    pub unit: DataUnit,
    pub sources: Option<Vec<String>>,
}

/// Result of one PE invocation, before it is recorded.
#[derive(Debug, Clone)]
pub(crate) struct StepOutcome {
    pub node: String,
    pub phase: Phase,
    /// (input port, entity id, seq) of the unit processed.
    pub input: Option<(String, Option<String>, u64)>,
    pub emitted: Vec<Emitted>,
    pub error: Option<String>,
}

fn function_of(id: &str, node: &Node) -> Result<String, EnactError> {
    match &node.descriptor.body {
        PeBody::Atomic { function } => Ok(function.clone()),
        PeBody::Composite(_) => Err(EnactError::PeFailure {
            instance: id.to_string(),
            message: "composite PE survived flattening".into(),
        }),
    }
}

pub(crate) fn check_instantiable(library: &PeLibrary, id: &str, node: &Node) -> Result<(), EnactError> {
    let f = function_of(id, node)?;
    if library.contains(&f) {
        Ok(())
    } else {
        Err(EnactError::PeFailure { instance: id.to_string(), message: format!("unknown PE function `{f}`") })
    }
}

/// Move a large array into the blob store, leaving a reference behind.
pub(crate) fn externalize(payload: Payload, blobs: Option<&BlobStore>) -> Payload {
    match (payload, blobs) {
        (Payload::Array(v), Some(store)) if v.len() * 8 > BLOB_THRESHOLD_BYTES => match store.put(&f64s_to_bytes(&v)) {
            Ok(r) => Payload::Blob(r),
            Err(_) => Payload::Array(v),
        },
        (p, _) => p,
    }
}

/// The array behind a blob reference.
pub(crate) fn rehydrate<'u>(unit: &'u DataUnit, blobs: Option<&BlobStore>) -> Result<Cow<'u, DataUnit>, String> {
    let Payload::Blob(BlobRef { digest, .. }) = &unit.payload else {
        return Ok(Cow::Borrowed(unit));
    };
    let store = blobs.ok_or_else(|| format!("blob {digest} but no blob store"))?;
    let bytes = store.get(digest).map_err(|e| e.to_string())?;
    let values = bytes_to_f64s(&bytes).ok_or_else(|| format!("blob {digest} is not a float64 array"))?;
    let mut u = unit.clone();
    u.payload = Payload::Array(values);
    Ok(Cow::Owned(u))
}

pub(crate) fn entity_id(run_id: &str, instance: &str, port: &str, seq: u64) -> String {
    format!("{run_id}/{instance}/{port}/{seq}")
}

/// A live PE instance plus its per-port sequence counters.
pub(crate) struct NodeExec {
    pub id: String,
    pub info: NodeInfo,
    pe: Box<dyn ProcessingElement>,
    seqs: BTreeMap<String, u64>,
    run_id: String,
    blobs: Option<Arc<BlobStore>>,
}

impl NodeExec {
    pub fn new(
        library: &PeLibrary,
        run_id: &str,
        id: &str,
        node: &Node,
        blobs: Option<Arc<BlobStore>>,
    ) -> Result<Self, EnactError> {
        let function = function_of(id, node)?;
        let params = node.effective_params();
        let pe = library
            .instantiate(&function, &params)
            .map_err(|e| EnactError::PeFailure { instance: id.to_string(), message: e.to_string() })?;
        Ok(NodeExec {
            id: id.to_string(),
            info: NodeInfo { name: node.descriptor.name.clone(), version: node.descriptor.version.clone(), params },
            pe,
            seqs: BTreeMap::new(),
            run_id: run_id.to_string(),
            blobs,
        })
    }

    pub fn invoke(&mut self, call: Call<'_>) -> StepOutcome {
        let mut out = Emitter::default();
        let (phase, input, result) = match call {
            Call::Start => (Phase::Start, None, self.pe.start(&mut out)),
            Call::Finish => (Phase::Finish, None, self.pe.finish(&mut out)),
            Call::Process { port, unit } => {
                let input = Some((port.to_string(), unit.prov_id.clone(), unit.seq));
                let r = match rehydrate(unit, self.blobs.as_deref()) {
                    Ok(u) => self.pe.process(port, &u, &mut out),
                    Err(e) => Err(crate::pe::PeError::new(e)),
                };
                (Phase::Process, input, r)
            }
        };
        let mut outcome = StepOutcome { node: self.id.clone(), phase, input, emitted: Vec::new(), error: None };
        if let Err(e) = result {
            outcome.error = Some(e.to_string());
            return outcome;
        }
        for e in out.take() {
            let seq = self.seqs.entry(e.port.clone()).or_insert(0);
            *seq += 1;
            let unit = DataUnit {
                payload: externalize(e.payload, self.blobs.as_deref()),
                metadata: e.metadata,
                prov_id: Some(entity_id(&self.run_id, &self.id, &e.port, *seq)),
                seq: *seq,
            };
            outcome.emitted.push(Emitted { port: e.port, unit, sources: e.sources });
        }
        outcome
    }
}

/// Descriptive part of a node needed to record its activities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct NodeInfo {
    pub name: String,
    pub version: String,
    pub params: Metadata,
}

impl NodeInfo {
    pub fn of(node: &Node) -> Self {
        NodeInfo {
            name: node.descriptor.name.clone(),
            version: node.descriptor.version.clone(),
            params: node.effective_params(),
        }
    }
}

pub(crate) struct RunContext {
    pub run_id: String,
    /// Present when provenance capture is on.
    pub prov: Option<Arc<Provenance>>,
    /// Time source for the run (the provenance service's clock).
    pub clock: Arc<Provenance>,
    pub blobs: Arc<BlobStore>,
    pub handle: Arc<RunHandle>,
    pub output_alias: BTreeMap<String, String>,
    pub graph_outputs: BTreeSet<String>,
    pub spill_on: bool,
    pub spill_quota: u64,
    pub spilled: AtomicU64,
}

impl RunContext {
    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn stopped(&self) -> bool {
        self.handle.stopped()
    }

    pub fn fail_run(&self, instance: &str, message: &str, seq: u64) {
        self.handle.fail(ErrorEntry { pe_instance: instance.to_string(), message: message.to_string(), seq }, self.now());
    }

    /// Reserve spill space; false once the quota is used up.
    pub fn reserve_spill(&self, bytes: u64) -> bool {
        let before = self.spilled.fetch_add(bytes, Ordering::SeqCst);
        before + bytes <= self.spill_quota
    }

    /// Number feed units, give them entity ids and move large arrays out.
    pub fn prepare_feeds(&self, graph: &WorkflowGraph, feeds: Feeds) -> Vec<(String, Vec<DataUnit>)> {
        let mut out: Vec<(String, Vec<DataUnit>)> = graph.feeds().keys().map(|k| (k.clone(), Vec::new())).collect();
        for (name, units) in feeds {
            let slot = out.iter_mut().find(|(k, _)| *k == name).expect("feeds checked at submit");
            slot.1 = units
                .into_iter()
                .enumerate()
                .map(|(i, u)| DataUnit {
                    payload: externalize(u.payload, Some(&self.blobs)),
                    metadata: u.metadata,
                    prov_id: Some(entity_id(&self.run_id, "feed", &name, i as u64 + 1)),
                    seq: i as u64 + 1,
                })
                .collect();
        }
        out
    }

    /// Record a feed unit as an entity of its own `feed:<name>` activity.
    pub fn record_feed(&self, feed: &str, unit: &DataUnit) {
        let Some(prov) = &self.prov else { return };
        let now = self.now();
        let act = ActivityInput {
            activity_id: None,
            run_id: self.run_id.clone(),
            pe_instance: format!("feed:{feed}"),
            pe_name: "feed".into(),
            pe_version: "1".into(),
            parameters: [("feed".to_string(), Value::from(feed))].into(),
            started_at: now,
            ended_at: now,
            error_message: None,
        };
        let output = StepOutput {
            entity_id: unit.prov_id.clone(),
            payload: unit.payload.clone(),
            metadata: unit.metadata.clone(),
            sources: None,
        };
        match prov.record_step(act, &[], &[output]) {
            Ok(receipt) => {
                self.handle.add_activity(receipt.activity_id);
                self.react(&format!("feed:{feed}"), receipt.fired);
            }
            Err(e) => self.fail_run(&format!("feed:{feed}"), &format!("{}: {e}", e.code()), unit.seq),
        }
    }

    /// Record a finished invocation. Returns false when the run must stop.
    pub fn record(&self, info: &NodeInfo, outcome: &StepOutcome, started_at: Timestamp, ended_at: Timestamp) -> bool {
        let seq = outcome.input.as_ref().map_or(0, |i| i.2);
        if let Some((port, _, _)) = &outcome.input {
            self.handle.processed.fetch_add(1, Ordering::SeqCst);
            let detail: Metadata = [
                ("port".to_string(), Value::from(port.as_str())),
                ("seq".to_string(), Value::Int(seq as i64)),
                ("emitted".to_string(), Value::Int(outcome.emitted.len() as i64)),
            ]
            .into();
            self.handle.push_event(RunEventKind::UnitProcessed, Some(&outcome.node), ended_at, detail);
        }
        if let Some(prov) = &self.prov {
            if !outcome.emitted.is_empty() || outcome.error.is_some() {
                let act = ActivityInput {
                    activity_id: None,
                    run_id: self.run_id.clone(),
                    pe_instance: outcome.node.clone(),
                    pe_name: info.name.clone(),
                    pe_version: info.version.clone(),
                    parameters: info.params.clone(),
                    started_at,
                    ended_at,
                    error_message: outcome.error.clone(),
                };
                let inputs: Vec<String> = outcome.input.iter().filter_map(|i| i.1.clone()).collect();
                let outputs: Vec<StepOutput> = outcome
                    .emitted
                    .iter()
                    .map(|e| StepOutput {
                        entity_id: e.unit.prov_id.clone(),
                        payload: e.unit.payload.clone(),
                        metadata: e.unit.metadata.clone(),
                        sources: e.sources.clone(),
                    })
                    .collect();
                match prov.record_step(act, &inputs, &outputs) {
                    Ok(receipt) => {
                        self.handle.add_activity(receipt.activity_id);
                        self.react(&outcome.node, receipt.fired);
                    }
                    Err(e) => {
                        self.fail_run(&outcome.node, &format!("{}: {e}", e.code()), seq);
                        return false;
                    }
                }
            }
        }
        if let Some(err) = &outcome.error {
            self.fail_run(&outcome.node, err, seq);
            return false;
        }
        for e in &outcome.emitted {
            let addr = format!("{}.{}", outcome.node, e.port);
            if self.graph_outputs.contains(&addr) {
                let outer = self.output_alias.get(&addr).cloned().unwrap_or(addr);
                self.handle.add_output(&outer, e.unit.clone());
            }
        }
        !self.stopped()
    }

    fn react(&self, source: &str, fired: Vec<crate::provenance::FiredAction>) {
        for f in fired {
            let (kind, extra) = match &f.action {
                TriggerAction::CancelRun => ("cancelRun", None),
                TriggerAction::ShipEntity { sink } => ("shipEntity", Some(sink.clone())),
                TriggerAction::Notify { channel } => ("notify", Some(channel.clone())),
            };
            let mut detail: Metadata = [
                ("ruleId".to_string(), Value::from(f.rule_id.as_str())),
                ("action".to_string(), Value::from(kind)),
                ("activityId".to_string(), Value::from(f.activity_id.as_str())),
            ]
            .into();
            if let Some(e) = &f.entity_id {
                detail.insert("entityId".into(), Value::from(e.as_str()));
            }
            if let Some(x) = extra {
                detail.insert("target".into(), Value::from(x));
            }
            self.handle.push_event(RunEventKind::TriggerFired, Some(source), self.now(), detail);
            if f.action == TriggerAction::CancelRun {
                self.handle.request_cancel();
            }
        }
    }

    /// Invoke and record in one go, for in-process backends.
    pub fn step(&self, exec: &mut NodeExec, call: Call<'_>) -> (StepOutcome, bool) {
        let t0 = self.now();
        let outcome = exec.invoke(call);
        let t1 = self.now();
        let go = self.record(&exec.info, &outcome, t0, t1);
        (outcome, go)
    }
}

/// Output port to the (instance, input port) pairs it feeds.
pub(crate) fn routes(graph: &WorkflowGraph) -> BTreeMap<(String, String), Vec<(String, String)>> {
    let mut r: BTreeMap<(String, String), Vec<(String, String)>> = BTreeMap::new();
    for e in graph.edges() {
        r.entry((e.from.instance.clone(), e.from.port.clone()))
            .or_default()
            .push((e.to.instance.clone(), e.to.port.clone()));
    }
    r
}
