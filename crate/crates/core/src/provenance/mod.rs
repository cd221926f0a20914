//! Lineage capture and query.
//!
//! Enactment records one activity per PE invocation that produced output (or
//! failed), one entity per emitted unit, and one derivation edge per
//! (output, source) pair. The store is an append-only log with in-memory
//! indexes; runtime trigger rules are evaluated against every fresh record.

mod export;
mod script;
mod store;
mod triggers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::value::{Metadata, Value};

pub use export::ProvDocument;
pub use script::download_script;
pub use store::{AncestorMatch, LineageSlice, ProvStore};
pub use triggers::{
    CompareOp, FiredAction, FreshRecord, MemorySink, DirSink, Predicate, Provenance, ShipSink, StepOutput,
    StepReceipt, TriggerAction, TriggerRule, TriggerScope, TriggerTarget,
};

#[derive(Debug, Error)]
pub enum ProvError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("malformed range for `{key}`: {reason}")]
    MalformedRange { key: String, reason: String },
    #[error("max depth must be at least 1")]
    InvalidDepth,
    #[error("derivation {derived} <- {parent} would close a cycle")]
    LineageCycle { derived: String, parent: String },
    #[error("unknown sink `{0}`")]
    UnknownSink(String),
    #[error("predicate key `{0}` is not declared")]
    InvalidPredicateKey(String),
    #[error("invalid trigger rule: {0}")]
    InvalidRule(String),
    #[error("ship to `{sink}` failed: {reason}")]
    ShipFailed { sink: String, reason: String },
    #[error("malformed provenance document: {0}")]
    Import(String),
    #[error("corrupt provenance log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("provenance io: {0}")]
    Io(#[from] std::io::Error),
}

impl ProvError {
    pub fn code(&self) -> &'static str {
        match self {
            ProvError::UnknownRun(_) => "UnknownRun",
            ProvError::UnknownEntity(_) => "UnknownEntity",
            ProvError::UnknownActivity(_) => "UnknownActivity",
            ProvError::DuplicateId(_) => "DuplicateId",
            ProvError::MalformedRange { .. } => "MalformedRange",
            ProvError::InvalidDepth => "InvalidDepth",
            ProvError::LineageCycle { .. } => "LineageCycle",
            ProvError::UnknownSink(_) => "UnknownSink",
            ProvError::InvalidPredicateKey(_) => "InvalidPredicateKey",
            ProvError::InvalidRule(_) => "InvalidRule",
            ProvError::ShipFailed { .. } => "ShipFailed",
            ProvError::Import(_) => "MalformedDocument",
            ProvError::CorruptLog { .. } => "CorruptLog",
            ProvError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvEntity {
    pub entity_id: String,
    pub payload_digest: String,
    pub metadata: Metadata,
    pub generated_by: String,
    pub at_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvActivity {
    pub activity_id: String,
    pub run_id: String,
    pub pe_instance: String,
    pub pe_name: String,
    pub pe_version: String,
    pub parameters: Metadata,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    pub status: ActivityStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DerivationEdge {
    pub derived: String,
    pub source: String,
    pub activity_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvAgent {
    pub agent_id: String,
    pub display_name: String,
    pub runs: Vec<String>,
}

/// Run-level record kept by the store: what queryRuns searches and returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub agent_id: String,
    pub graph_ref: String,
    pub backend: String,
    pub status: String,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShipEvent {
    pub rule_id: String,
    pub entity_id: String,
    pub sink: String,
    pub at_time: Timestamp,
}

/// What the caller knows about an activity before it is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityInput {
    /// Store-generated when absent.
    pub activity_id: Option<String>,
    pub run_id: String,
    pub pe_instance: String,
    pub pe_name: String,
    pub pe_version: String,
    pub parameters: Metadata,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    pub error_message: Option<String>,
}

/// One output unit of a step as the store sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRecord {
    pub entity_id: Option<String>,
    pub payload_digest: String,
    pub metadata: Metadata,
    /// Derivation sources; `None` means every input of the step.
    pub sources: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIds {
    pub activity_id: String,
    pub output_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineageDirection {
    Ancestors,
    Descendants,
}

/// One conjunct of a metadata query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum Criterion {
    /// Closed numeric interval; timestamps are epoch seconds.
    Range(f64, f64),
    Exact(Value),
}

impl TryFrom<Value> for Criterion {
    type Error = String;

    fn try_from(v: Value) -> Result<Self, String> {
        if let Value::List(items) = &v {
            if let [lo, hi] = items.as_slice() {
                if let (Some(lo), Some(hi)) = (lo.as_f64(), hi.as_f64()) {
                    return Ok(Criterion::Range(lo, hi));
                }
            }
        }
        Ok(Criterion::Exact(v))
    }
}

impl From<Criterion> for Value {
    fn from(c: Criterion) -> Value {
        match c {
            Criterion::Range(lo, hi) => Value::List(vec![Value::Float(lo), Value::Float(hi)]),
            Criterion::Exact(v) => v,
        }
    }
}

impl Criterion {
    pub fn matches(&self, v: &Value) -> bool {
        match self {
            Criterion::Range(lo, hi) => v.as_f64().is_some_and(|x| *lo <= x && x <= *hi),
            Criterion::Exact(want) => match (want.as_f64(), v.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => want == v,
            },
        }
    }
}

pub type Criteria = BTreeMap<String, Criterion>;

pub fn check_criteria(criteria: &Criteria) -> Result<(), ProvError> {
    for (key, c) in criteria {
        if let Criterion::Range(lo, hi) = c {
            if lo.is_nan() || hi.is_nan() {
                return Err(ProvError::MalformedRange { key: key.clone(), reason: "NaN bound".into() });
            }
            if lo > hi {
                return Err(ProvError::MalformedRange { key: key.clone(), reason: format!("{lo} > {hi}") });
            }
        }
    }
    Ok(())
}

/// Every conjunct matches. Absent keys match nothing.
pub fn metadata_matches(meta: &Metadata, criteria: &Criteria) -> bool {
    criteria.iter().all(|(k, c)| meta.get(k).is_some_and(|v| c.matches(v)))
}

pub fn parse_criteria(json: &str) -> Result<Criteria, ProvError> {
    let c: Criteria = serde_json::from_str(json)
        .map_err(|e| ProvError::MalformedRange { key: "*".into(), reason: e.to_string() })?;
    check_criteria(&c)?;
    Ok(c)
}
