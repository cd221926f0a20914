//! Processing-element runtime contract and the library of built-in PEs.
//!
//! Atomic descriptors name a library function; every backend (including
//! worker processes) instantiates PEs from the same [`PeLibrary`].

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::graph::{ParamKind, ParamSpec, PeDescriptor};
use crate::value::{DataUnit, Metadata, Payload, Value};

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct PeError(pub String);

impl PeError {
    pub fn new(msg: impl Into<String>) -> Self {
        PeError(msg.into())
    }
}

/// One unit a PE asks to emit.
#[derive(Debug, Clone)]
pub struct Emission {
    pub port: String,
    pub payload: Payload,
    pub metadata: Metadata,
    /// Entities this unit derives from. `None` means the unit being processed.
    pub sources: Option<Vec<String>>,
}

#[derive(Debug, Default)]
pub struct Emitter {
    emissions: Vec<Emission>,
}

impl Emitter {
    pub fn emit(&mut self, port: &str, payload: Payload, metadata: Metadata) {
        self.emissions.push(Emission { port: port.to_string(), payload, metadata, sources: None });
    }

    /// Emit with explicit lineage, for stateful PEs combining several inputs.
    pub fn emit_derived(&mut self, port: &str, payload: Payload, metadata: Metadata, sources: Vec<String>) {
        self.emissions.push(Emission { port: port.to_string(), payload, metadata, sources: Some(sources) });
    }

    pub fn take(&mut self) -> Vec<Emission> {
        std::mem::take(&mut self.emissions)
    }

    pub fn len(&self) -> usize {
        self.emissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }
}

pub trait ProcessingElement: Send {
    /// Called once before any input arrives. Source PEs emit here.
    fn start(&mut self, _out: &mut Emitter) -> Result<(), PeError> {
        Ok(())
    }

    fn process(&mut self, port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError>;

    /// Called once after every input stream has ended.
    fn finish(&mut self, _out: &mut Emitter) -> Result<(), PeError> {
        Ok(())
    }
}

pub type PeFactory = fn(&Metadata) -> Result<Box<dyn ProcessingElement>, PeError>;

/// Function name -> (descriptor template, factory).
#[derive(Clone)]
pub struct PeLibrary {
    entries: BTreeMap<String, (Arc<PeDescriptor>, PeFactory)>,
}

impl PeLibrary {
    pub fn empty() -> Self {
        PeLibrary { entries: BTreeMap::new() }
    }

    /// Generic stream PEs plus the seismology PEs.
    pub fn builtin() -> Self {
        let mut lib = Self::empty();
        register_generic(&mut lib);
        crate::seismo::pes::register(&mut lib);
        lib
    }

    pub fn register(&mut self, descriptor: PeDescriptor, factory: PeFactory) {
        let function = match &descriptor.body {
            crate::graph::PeBody::Atomic { function } => function.clone(),
            crate::graph::PeBody::Composite(_) => panic!("library entries must be atomic"),
        };
        self.entries.insert(function, (Arc::new(descriptor), factory));
    }

    pub fn descriptor(&self, function: &str) -> Option<Arc<PeDescriptor>> {
        self.entries.get(function).map(|(d, _)| d.clone())
    }

    pub fn functions(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn instantiate(&self, function: &str, params: &Metadata) -> Result<Box<dyn ProcessingElement>, PeError> {
        let (_, factory) =
            self.entries.get(function).ok_or_else(|| PeError::new(format!("unknown PE function `{function}`")))?;
        factory(params)
    }

    pub fn contains(&self, function: &str) -> bool {
        self.entries.contains_key(function)
    }
}

/// Descriptor of a built-in function, used for `builtin:<name>` references.
pub fn builtin_descriptor(function: &str) -> Option<Arc<PeDescriptor>> {
    static LIB: std::sync::OnceLock<PeLibrary> = std::sync::OnceLock::new();
    LIB.get_or_init(PeLibrary::builtin).descriptor(function)
}

pub fn param_f64(p: &Metadata, key: &str) -> Result<f64, PeError> {
    p.get(key).and_then(Value::as_f64).ok_or_else(|| PeError::new(format!("parameter `{key}` must be a number")))
}

pub fn param_i64(p: &Metadata, key: &str) -> Result<i64, PeError> {
    p.get(key).and_then(Value::as_i64).ok_or_else(|| PeError::new(format!("parameter `{key}` must be an integer")))
}

pub fn param_str<'a>(p: &'a Metadata, key: &str) -> Result<&'a str, PeError> {
    p.get(key).and_then(Value::as_str).ok_or_else(|| PeError::new(format!("parameter `{key}` must be a string")))
}

fn map_numbers(payload: &Payload, f: impl Fn(f64) -> f64) -> Result<Payload, PeError> {
    match payload {
        Payload::Scalar(x) => Ok(Payload::Scalar(f(*x))),
        Payload::Array(xs) => Ok(Payload::Array(xs.iter().map(|&x| f(x)).collect())),
        other => Err(PeError::new(format!("expected numeric payload, got {}", other.kind_name()))),
    }
}

struct Identity;

impl ProcessingElement for Identity {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        out.emit("o", unit.payload.clone(), unit.metadata.clone());
        Ok(())
    }
}

struct Scale(f64);

impl ProcessingElement for Scale {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        let k = self.0;
        out.emit("o", map_numbers(&unit.payload, |x| x * k)?, unit.metadata.clone());
        Ok(())
    }
}

struct Offset(f64);

impl ProcessingElement for Offset {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        let k = self.0;
        out.emit("o", map_numbers(&unit.payload, |x| x + k)?, unit.metadata.clone());
        Ok(())
    }
}

struct Duplicate;

impl ProcessingElement for Duplicate {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        out.emit("o", unit.payload.clone(), unit.metadata.clone());
        out.emit("o", unit.payload.clone(), unit.metadata.clone());
        Ok(())
    }
}

/// Passes units whose maximum exceeds the threshold.
struct Threshold(f64);

impl ProcessingElement for Threshold {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        if unit.payload.max().is_some_and(|m| m > self.0) {
            out.emit("o", unit.payload.clone(), unit.metadata.clone());
        }
        Ok(())
    }
}

/// Zips ports `a` and `b` in arrival order per port and emits their sum.
#[derive(Default)]
struct PairSum {
    a: VecDeque<DataUnit>,
    b: VecDeque<DataUnit>,
}

impl ProcessingElement for PairSum {
    fn process(&mut self, port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        match port {
            "a" => self.a.push_back(unit.clone()),
            "b" => self.b.push_back(unit.clone()),
            other => return Err(PeError::new(format!("pair_sum has no port `{other}`"))),
        }
        while let (Some(_), Some(_)) = (self.a.front(), self.b.front()) {
            let (x, y) = (self.a.pop_front().unwrap(), self.b.pop_front().unwrap());
            let payload = match (&x.payload, &y.payload) {
                (Payload::Scalar(p), Payload::Scalar(q)) => Payload::Scalar(p + q),
                (Payload::Array(p), Payload::Array(q)) if p.len() == q.len() => {
                    Payload::Array(p.iter().zip(q).map(|(u, v)| u + v).collect())
                }
                _ => return Err(PeError::new("pair_sum needs matching numeric payloads")),
            };
            let sources = [x.prov_id.clone(), y.prov_id.clone()].into_iter().flatten().collect();
            out.emit_derived("o", payload, x.metadata.clone(), sources);
        }
        Ok(())
    }
}

/// Source PE: emits `count` scalars `start, start+step, ...`.
struct Ramp {
    count: i64,
    start: f64,
    step: f64,
}

impl ProcessingElement for Ramp {
    fn start(&mut self, out: &mut Emitter) -> Result<(), PeError> {
        for i in 0..self.count {
            out.emit("o", Payload::Scalar(self.start + self.step * i as f64), Metadata::new());
        }
        Ok(())
    }

    fn process(&mut self, port: &str, _unit: &DataUnit, _out: &mut Emitter) -> Result<(), PeError> {
        Err(PeError::new(format!("ramp has no input `{port}`")))
    }
}

/// Identity that fails on the `at`-th unit it processes (1-based).
struct FailAt {
    at: i64,
    seen: i64,
}

impl ProcessingElement for FailAt {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        self.seen += 1;
        if self.seen == self.at {
            return Err(PeError::new(format!("forced failure on unit {}", self.seen)));
        }
        out.emit("o", unit.payload.clone(), unit.metadata.clone());
        Ok(())
    }
}

/// Identity that sleeps before each unit.
struct Slow(Duration);

impl ProcessingElement for Slow {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        std::thread::sleep(self.0);
        out.emit("o", unit.payload.clone(), unit.metadata.clone());
        Ok(())
    }
}

/// Sums every numeric value it sees; emits the total when the stream ends.
#[derive(Default)]
struct Sum {
    total: f64,
    sources: Vec<String>,
}

impl ProcessingElement for Sum {
    fn process(&mut self, _port: &str, unit: &DataUnit, _out: &mut Emitter) -> Result<(), PeError> {
        self.total += match &unit.payload {
            Payload::Scalar(x) => *x,
            Payload::Array(xs) => xs.iter().sum(),
            _ => return Err(PeError::new("sum needs numeric payloads")),
        };
        self.sources.extend(unit.prov_id.clone());
        Ok(())
    }

    fn finish(&mut self, out: &mut Emitter) -> Result<(), PeError> {
        out.emit_derived("o", Payload::Scalar(self.total), Metadata::new(), std::mem::take(&mut self.sources));
        Ok(())
    }
}

fn register_generic(lib: &mut PeLibrary) {
    use ParamKind::*;
    lib.register(PeDescriptor::atomic("identity", "identity", &["i"], &["o"]), |_| Ok(Box::new(Identity)));
    lib.register(
        PeDescriptor::atomic("scale", "scale", &["i"], &["o"]).with_param("factor", ParamSpec::optional(Float, 1.0)),
        |p| Ok(Box::new(Scale(param_f64(p, "factor")?))),
    );
    lib.register(
        PeDescriptor::atomic("offset", "offset", &["i"], &["o"]).with_param("amount", ParamSpec::optional(Float, 0.0)),
        |p| Ok(Box::new(Offset(param_f64(p, "amount")?))),
    );
    lib.register(PeDescriptor::atomic("duplicate", "duplicate", &["i"], &["o"]), |_| Ok(Box::new(Duplicate)));
    lib.register(
        PeDescriptor::atomic("threshold", "threshold", &["i"], &["o"])
            .with_param("above", ParamSpec::optional(Float, 0.0)),
        |p| Ok(Box::new(Threshold(param_f64(p, "above")?))),
    );
    lib.register(PeDescriptor::atomic("pair_sum", "pair_sum", &["a", "b"], &["o"]).stateful(), |_| {
        Ok(Box::new(PairSum::default()))
    });
    lib.register(
        PeDescriptor::atomic("ramp", "ramp", &[], &["o"])
            .with_param("count", ParamSpec::required(Int))
            .with_param("start", ParamSpec::optional(Float, 0.0))
            .with_param("step", ParamSpec::optional(Float, 1.0)),
        |p| {
            Ok(Box::new(Ramp {
                count: param_i64(p, "count")?,
                start: param_f64(p, "start")?,
                step: param_f64(p, "step")?,
            }))
        },
    );
    lib.register(
        PeDescriptor::atomic("fail_at", "fail_at", &["i"], &["o"]).with_param("at", ParamSpec::required(Int)),
        |p| Ok(Box::new(FailAt { at: param_i64(p, "at")?, seen: 0 })),
    );
    lib.register(
        PeDescriptor::atomic("slow", "slow", &["i"], &["o"]).with_param("micros", ParamSpec::optional(Int, 100i64)),
        |p| Ok(Box::new(Slow(Duration::from_micros(param_i64(p, "micros")?.max(0) as u64)))),
    );
    lib.register(PeDescriptor::atomic("sum", "sum", &["i"], &["o"]).stateful(), |_| Ok(Box::new(Sum::default())));
}
