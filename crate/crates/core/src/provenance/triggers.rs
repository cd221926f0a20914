use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    ActivityInput, ActivityStatus, OutputRecord, ProvActivity, ProvEntity, ProvError, ProvStore, ShipEvent,
};
use crate::blob::BlobStore;
use crate::clock::{Clock, SystemClock};
use crate::value::{encode_payload_bytes, Payload, Value};

/// Metadata keys the built-in PEs attach; always accepted in predicates.
pub const WELL_KNOWN_KEYS: &[&str] =
    &["station", "network", "channel", "pair", "window", "stage", "start_time", "dt", "units", "pe", "magnitude"];

/// Which freshly recorded runs a rule applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TriggerScope {
    RunId(String),
    PeName(String),
    Any,
}

/// Which kind of fresh record a predicate looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerTarget {
    #[default]
    Entity,
    Activity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "camelCase")]
pub enum CompareOp {
    Eq(Value),
    Lt(f64),
    Gt(f64),
    Range(f64, f64),
    IsNaN,
    Matches(String),
}

/// `field op value`. Fields: `payload.max|min|mean|len`, `pe.name`, `status`,
/// `metadata.<key>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: String,
    #[serde(flatten)]
    pub op: CompareOp,
}

impl Predicate {
    pub fn new(field: &str, op: CompareOp) -> Self {
        Predicate { field: field.to_string(), op }
    }

    fn compare(&self, v: Option<Value>) -> bool {
        let Some(v) = v else { return false };
        match &self.op {
            CompareOp::Eq(want) => match (want.as_f64(), v.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => *want == v,
            },
            CompareOp::Lt(x) => v.as_f64().is_some_and(|y| y < *x),
            CompareOp::Gt(x) => v.as_f64().is_some_and(|y| y > *x),
            CompareOp::Range(lo, hi) => v.as_f64().is_some_and(|y| *lo <= y && y <= *hi),
            CompareOp::IsNaN => v.as_f64().is_some_and(f64::is_nan),
            CompareOp::Matches(pattern) => {
                let text = match &v {
                    Value::Str(s) => s.clone(),
                    other => other.to_string(),
                };
                glob::Pattern::new(pattern).is_ok_and(|p| p.matches(&text))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum TriggerAction {
    CancelRun,
    ShipEntity { sink: String },
    Notify { channel: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TriggerRule {
    pub rule_id: String,
    pub scope: TriggerScope,
    #[serde(default)]
    pub target: TriggerTarget,
    pub predicate: Predicate,
    pub action: TriggerAction,
}

/// A record just appended to the store, with its payload when it is an entity.
#[derive(Debug, Clone)]
pub struct FreshRecord {
    pub activity: ProvActivity,
    pub entity: Option<ProvEntity>,
    pub payload: Option<Payload>,
}

impl FreshRecord {
    fn target(&self) -> TriggerTarget {
        if self.entity.is_some() {
            TriggerTarget::Entity
        } else {
            TriggerTarget::Activity
        }
    }

    fn field(&self, field: &str) -> Option<Value> {
        let payload_stat = |f: fn(&Payload) -> Option<f64>| self.payload.as_ref().and_then(f).map(Value::Float);
        match field {
            "payload.max" => payload_stat(Payload::max),
            "payload.min" => payload_stat(Payload::min),
            "payload.mean" => payload_stat(Payload::mean),
            "payload.len" => self.payload.as_ref().map(|p| Value::Int(p.len() as i64)),
            "pe.name" => Some(Value::Str(self.activity.pe_name.clone())),
            "pe.instance" => Some(Value::Str(self.activity.pe_instance.clone())),
            "status" => Some(Value::Str(
                match self.activity.status {
                    ActivityStatus::Ok => "ok",
                    ActivityStatus::Error => "error",
                }
                .into(),
            )),
            other => {
                let key = other.strip_prefix("metadata.")?;
                self.entity.as_ref()?.metadata.get(key).cloned()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FiredAction {
    pub rule_id: String,
    pub run_id: String,
    pub action: TriggerAction,
    pub activity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
}

/// Destination for shipped intermediate data.
pub trait ShipSink: Send + Sync {
    fn ship(&self, entity: &ProvEntity, payload: &[u8]) -> Result<(), String>;
}

/// Keeps shipped payloads in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    received: Mutex<Vec<(String, Vec<u8>)>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn received(&self) -> Vec<(String, Vec<u8>)> {
        self.received.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.received.lock().unwrap().len()
    }
}

impl ShipSink for MemorySink {
    fn ship(&self, entity: &ProvEntity, payload: &[u8]) -> Result<(), String> {
        self.received.lock().unwrap().push((entity.entity_id.clone(), payload.to_vec()));
        Ok(())
    }
}

/// Writes `<stem>.bin` plus a `<stem>.json` entity record, the stem being the entity id with punctuation replaced.
#[derive(Debug)]
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, ProvError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(DirSink { dir })
    }
}

impl ShipSink for DirSink {
    fn ship(&self, entity: &ProvEntity, payload: &[u8]) -> Result<(), String> {
        let stem = entity.entity_id.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_");
        std::fs::write(self.dir.join(format!("{stem}.bin")), payload).map_err(|e| e.to_string())?;
        let meta = serde_json::to_vec_pretty(entity).map_err(|e| e.to_string())?;
        std::fs::write(self.dir.join(format!("{stem}.json")), meta).map_err(|e| e.to_string())
    }
}

/// One output of a step before it is stored.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub entity_id: Option<String>,
    pub payload: Payload,
    pub metadata: crate::value::Metadata,
    pub sources: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReceipt {
    pub activity_id: String,
    pub output_ids: Vec<String>,
    pub fired: Vec<FiredAction>,
}

/// Store plus trigger rules, sinks and (optionally) payload retention.
pub struct Provenance {
    store: Arc<ProvStore>,
    blobs: Option<Arc<BlobStore>>,
    clock: Arc<dyn Clock>,
    rules: RwLock<Vec<TriggerRule>>,
    sinks: RwLock<BTreeMap<String, Arc<dyn ShipSink>>>,
    declared: RwLock<BTreeSet<String>>,
}

impl Provenance {
    pub fn new(store: Arc<ProvStore>) -> Self {
        Provenance {
            store,
            blobs: None,
            clock: Arc::new(SystemClock),
            rules: RwLock::new(Vec::new()),
            sinks: RwLock::new(BTreeMap::new()),
            declared: RwLock::new(WELL_KNOWN_KEYS.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(Arc::new(ProvStore::in_memory()))
    }

    /// Keep every recorded payload in `blobs`, keyed by its digest.
    pub fn with_blobs(mut self, blobs: Arc<BlobStore>) -> Self {
        self.blobs = Some(blobs);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn store(&self) -> &Arc<ProvStore> {
        &self.store
    }

    pub fn blobs(&self) -> Option<&Arc<BlobStore>> {
        self.blobs.as_ref()
    }

    pub fn declare_keys<I: IntoIterator<Item = S>, S: Into<String>>(&self, keys: I) {
        self.declared.write().unwrap().extend(keys.into_iter().map(Into::into));
    }

    pub fn add_sink(&self, name: &str, sink: Arc<dyn ShipSink>) {
        self.sinks.write().unwrap().insert(name.to_string(), sink);
    }

    pub fn register_trigger(&self, rule: TriggerRule) -> Result<(), ProvError> {
        let field = rule.predicate.field.as_str();
        let known = matches!(
            field,
            "payload.max" | "payload.min" | "payload.mean" | "payload.len" | "pe.name" | "pe.instance" | "status"
        );
        if !known {
            match field.strip_prefix("metadata.") {
                Some(key) if self.declared.read().unwrap().contains(key) => {}
                _ => return Err(ProvError::InvalidPredicateKey(field.to_string())),
            }
        }
        if field.starts_with("payload.") || field.starts_with("metadata.") {
            if rule.target == TriggerTarget::Activity {
                return Err(ProvError::InvalidRule(format!("`{field}` is only defined for entities")));
            }
        }
        if let CompareOp::Range(lo, hi) = rule.predicate.op {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(ProvError::MalformedRange { key: field.to_string(), reason: format!("{lo} > {hi}") });
            }
        }
        if let CompareOp::Matches(p) = &rule.predicate.op {
            glob::Pattern::new(p).map_err(|e| ProvError::InvalidRule(e.to_string()))?;
        }
        if let TriggerAction::ShipEntity { sink } = &rule.action {
            if rule.target == TriggerTarget::Activity {
                return Err(ProvError::InvalidRule("shipEntity needs an entity target".into()));
            }
            if !self.sinks.read().unwrap().contains_key(sink) {
                return Err(ProvError::UnknownSink(sink.clone()));
            }
        }
        let mut rules = self.rules.write().unwrap();
        if rules.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(ProvError::DuplicateId(rule.rule_id));
        }
        rules.push(rule);
        Ok(())
    }

    pub fn rules(&self) -> Vec<TriggerRule> {
        self.rules.read().unwrap().clone()
    }

    /// Fire every in-scope rule whose predicate matches. Ships are performed here;
    /// cancellation is left to the caller, which owns the run.
    pub fn evaluate_triggers(&self, record: &FreshRecord) -> Result<Vec<FiredAction>, ProvError> {
        let rules = self.rules.read().unwrap();
        let mut fired = Vec::new();
        for rule in rules.iter() {
            let in_scope = match &rule.scope {
                TriggerScope::RunId(r) => *r == record.activity.run_id,
                TriggerScope::PeName(p) => *p == record.activity.pe_name,
                TriggerScope::Any => true,
            };
            if !in_scope || rule.target != record.target() || !rule.predicate.compare(record.field(&rule.predicate.field))
            {
                continue;
            }
            if let TriggerAction::ShipEntity { sink } = &rule.action {
                self.ship(rule, sink, record)?;
            }
            fired.push(FiredAction {
                rule_id: rule.rule_id.clone(),
                run_id: record.activity.run_id.clone(),
                action: rule.action.clone(),
                activity_id: record.activity.activity_id.clone(),
                entity_id: record.entity.as_ref().map(|e| e.entity_id.clone()),
            });
        }
        Ok(fired)
    }

    fn ship(&self, rule: &TriggerRule, sink_name: &str, record: &FreshRecord) -> Result<(), ProvError> {
        let (Some(entity), Some(payload)) = (&record.entity, &record.payload) else { return Ok(()) };
        let sink = self.sinks.read().unwrap().get(sink_name).cloned().ok_or_else(|| ProvError::UnknownSink(sink_name.into()))?;
        sink.ship(entity, &encode_payload_bytes(payload))
            .map_err(|reason| ProvError::ShipFailed { sink: sink_name.to_string(), reason })?;
        self.store.record_ship(ShipEvent {
            rule_id: rule.rule_id.clone(),
            entity_id: entity.entity_id.clone(),
            sink: sink_name.to_string(),
            at_time: self.clock.now(),
        })
    }

    /// Store one step, retain its payloads, then evaluate triggers on each new record.
    pub fn record_step(
        &self,
        activity: ActivityInput,
        inputs: &[String],
        outputs: &[StepOutput],
    ) -> Result<StepReceipt, ProvError> {
        let records: Vec<OutputRecord> = outputs
            .iter()
            .map(|o| OutputRecord {
                entity_id: o.entity_id.clone(),
                payload_digest: o.payload.digest(),
                metadata: o.metadata.clone(),
                sources: o.sources.clone(),
            })
            .collect();
        let ids = self.store.record_step(activity, inputs, &records)?;
        if let Some(blobs) = &self.blobs {
            for o in outputs {
                blobs
                    .put(&encode_payload_bytes(&o.payload))
                    .map_err(|e| ProvError::Io(std::io::Error::other(e.to_string())))?;
            }
        }
        let mut fired = Vec::new();
        if !self.rules.read().unwrap().is_empty() {
            let activity = self.store.activity(&ids.activity_id).expect("activity just recorded");
            for (o, id) in outputs.iter().zip(&ids.output_ids) {
                let entity = self.store.entity(id).expect("entity just recorded");
                let rec = FreshRecord { activity: activity.clone(), entity: Some(entity), payload: Some(o.payload.clone()) };
                fired.extend(self.evaluate_triggers(&rec)?);
            }
            fired.extend(self.evaluate_triggers(&FreshRecord { activity, entity: None, payload: None })?);
        }
        Ok(StepReceipt { activity_id: ids.activity_id, output_ids: ids.output_ids, fired })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provenance::RunSummary;
    use crate::value::Metadata;

    fn service() -> Provenance {
        let p = Provenance::in_memory();
        p.store()
            .begin_run(RunSummary {
                run_id: "r".into(),
                agent_id: "u".into(),
                graph_ref: "g".into(),
                backend: "sequential".into(),
                status: "running".into(),
                started_at: 0.0,
                ended_at: None,
                metadata: Metadata::new(),
            })
            .unwrap();
        p
    }

    fn act(pe: &str) -> ActivityInput {
        ActivityInput {
            activity_id: None,
            run_id: "r".into(),
            pe_instance: pe.into(),
            pe_name: pe.into(),
            pe_version: "1".into(),
            parameters: Metadata::new(),
            started_at: 0.0,
            ended_at: 0.0,
            error_message: None,
        }
    }

    fn out(x: f64) -> StepOutput {
        StepOutput { entity_id: None, payload: Payload::Array(vec![1.0, x]), metadata: Metadata::new(), sources: None }
    }

    #[test]
    fn predicate_json_shape() {
        let rule: TriggerRule = serde_json::from_str(
            r#"{"ruleId":"nan","scope":"any","predicate":{"field":"payload.max","op":"isNaN"},"action":{"kind":"cancelRun"}}"#,
        )
        .unwrap();
        assert_eq!(rule.predicate.op, CompareOp::IsNaN);
        let r2: TriggerRule = serde_json::from_str(
            r#"{"ruleId":"s","scope":{"peName":"xcorr"},"predicate":{"field":"metadata.pair","op":"matches","value":"NET.*"},"action":{"kind":"shipEntity","sink":"mem"}}"#,
        )
        .unwrap();
        assert_eq!(r2.scope, TriggerScope::PeName("xcorr".into()));
        let back: TriggerRule = serde_json::from_str(&serde_json::to_string(&r2).unwrap()).unwrap();
        assert_eq!(back, r2);
    }

    #[test]
    fn no_rules_no_actions() {
        let p = service();
        let r = p.record_step(act("a"), &[], &[out(f64::NAN)]).unwrap();
        assert!(r.fired.is_empty());
    }

    #[test]
    fn nan_rule_fires_once_per_matching_entity() {
        let p = service();
        p.register_trigger(TriggerRule {
            rule_id: "nan".into(),
            scope: TriggerScope::Any,
            target: TriggerTarget::Entity,
            predicate: Predicate::new("payload.max", CompareOp::IsNaN),
            action: TriggerAction::CancelRun,
        })
        .unwrap();
        assert!(p.record_step(act("a"), &[], &[out(2.0)]).unwrap().fired.is_empty());
        let r = p.record_step(act("a"), &[], &[out(f64::NAN), out(1.0), out(f64::NAN)]).unwrap();
        assert_eq!(r.fired.len(), 2);
        assert_eq!(r.fired[0].entity_id.as_deref(), Some(r.output_ids[0].as_str()));
    }

    #[test]
    fn registration_checks_keys_and_sinks() {
        let p = service();
        let rule = |field: &str, action| TriggerRule {
            rule_id: field.into(),
            scope: TriggerScope::Any,
            target: TriggerTarget::Entity,
            predicate: Predicate::new(field, CompareOp::Gt(0.0)),
            action,
        };
        assert!(matches!(
            p.register_trigger(rule("metadata.nosuch", TriggerAction::CancelRun)),
            Err(ProvError::InvalidPredicateKey(_))
        ));
        assert!(matches!(
            p.register_trigger(rule("payload.max", TriggerAction::ShipEntity { sink: "x".into() })),
            Err(ProvError::UnknownSink(_))
        ));
        p.declare_keys(["nosuch"]);
        p.register_trigger(rule("metadata.nosuch", TriggerAction::Notify { channel: "c".into() })).unwrap();
    }

    #[test]
    fn ship_copies_payload_and_logs_event() {
        let p = service();
        let sink = Arc::new(MemorySink::new());
        p.add_sink("mem", sink.clone());
        p.register_trigger(TriggerRule {
            rule_id: "big".into(),
            scope: TriggerScope::PeName("a".into()),
            target: TriggerTarget::Entity,
            predicate: Predicate::new("payload.max", CompareOp::Gt(1.5)),
            action: TriggerAction::ShipEntity { sink: "mem".into() },
        })
        .unwrap();
        p.record_step(act("a"), &[], &[out(2.0), out(1.0), out(3.0)]).unwrap();
        p.record_step(act("b"), &[], &[out(9.0)]).unwrap();
        assert_eq!(sink.count(), 2);
        assert_eq!(p.store().ships().len(), 2);
        let (id, bytes) = &sink.received()[0];
        assert_eq!(crate::value::decode_payload_bytes(bytes).unwrap(), Payload::Array(vec![1.0, 2.0]));
        assert_eq!(p.store().entity(id).unwrap().payload_digest, Payload::Array(vec![1.0, 2.0]).digest());
    }
}
