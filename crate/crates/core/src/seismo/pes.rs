//! Seismology processing elements registered in the built-in library.

use std::collections::VecDeque;

use super::{
    apply_trace_transform, compute_misfit, cross_correlate, stack_correlations, CorrelationResult, MisfitKind,
    SeismoError, Trace, TransformKind,
};
use crate::graph::{ParamKind, ParamSpec, PeDescriptor};
use crate::pe::{param_f64, param_i64, param_str, Emitter, PeError, PeLibrary, ProcessingElement};
use crate::value::{DataUnit, Metadata, Payload, Value};

impl From<SeismoError> for PeError {
    fn from(e: SeismoError) -> Self {
        PeError::new(format!("{}: {e}", e.code()))
    }
}

fn open(kind: ParamKind) -> ParamSpec {
    ParamSpec { kind, required: false, default: None }
}

/// Splits each trace into consecutive `window_seconds` segments; a short tail is dropped.
struct Window {
    seconds: f64,
}

impl ProcessingElement for Window {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        let t = Trace::from_unit(unit)?;
        let w = (self.seconds / t.dt).round() as usize;
        if w == 0 {
            return Err(SeismoError::BadParams(format!("window of {}s is shorter than dt", self.seconds)).into());
        }
        for (k, chunk) in t.samples.chunks_exact(w).enumerate() {
            let mut win = t.with_samples(chunk.to_vec());
            win.start_time = t.start_time + (k * w) as f64 * t.dt;
            let mut u = win.to_unit();
            u.metadata.insert("window".into(), Value::Int(k as i64));
            out.emit("o", u.payload, u.metadata);
        }
        Ok(())
    }
}

/// One transform, or a chain of them, applied to every trace.
struct Transform {
    steps: Vec<TransformKind>,
}

impl ProcessingElement for Transform {
    fn process(&mut self, _port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        let mut t = Trace::from_unit(unit)?;
        for s in &self.steps {
            t = apply_trace_transform(s, &t)?;
        }
        let mut meta = unit.metadata.clone();
        meta.extend(t.metadata());
        out.emit("o", Payload::Array(t.samples), meta);
        Ok(())
    }
}

/// Pairs windows arriving on `a` and `b` in order and correlates each pair.
struct Correlate {
    max_lag: usize,
    a: VecDeque<DataUnit>,
    b: VecDeque<DataUnit>,
}

impl ProcessingElement for Correlate {
    fn process(&mut self, port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        match port {
            "a" => self.a.push_back(unit.clone()),
            "b" => self.b.push_back(unit.clone()),
            other => return Err(PeError::new(format!("xcorr has no input `{other}`"))),
        }
        while !self.a.is_empty() && !self.b.is_empty() {
            let (x, y) = (self.a.pop_front().unwrap(), self.b.pop_front().unwrap());
            let r = cross_correlate(&Trace::from_unit(&x)?, &Trace::from_unit(&y)?, self.max_lag)?;
            let mut u = r.to_unit();
            if let Some(w) = x.metadata.get("window") {
                u.metadata.insert("window".into(), w.clone());
            }
            u.metadata.insert("stage".into(), Value::from("correlation"));
            let sources = [x.prov_id, y.prov_id].into_iter().flatten().collect();
            out.emit_derived("o", u.payload, u.metadata, sources);
        }
        Ok(())
    }

    fn finish(&mut self, _out: &mut Emitter) -> Result<(), PeError> {
        if !self.a.is_empty() || !self.b.is_empty() {
            return Err(PeError::new(format!("unpaired windows: {} on a, {} on b", self.a.len(), self.b.len())));
        }
        Ok(())
    }
}

/// Stacks every correlation it receives; emits once when the stream ends.
#[derive(Default)]
struct Stack {
    results: Vec<CorrelationResult>,
    sources: Vec<String>,
}

impl ProcessingElement for Stack {
    fn process(&mut self, _port: &str, unit: &DataUnit, _out: &mut Emitter) -> Result<(), PeError> {
        self.results.push(CorrelationResult::from_unit(unit)?);
        self.sources.extend(unit.prov_id.clone());
        Ok(())
    }

    fn finish(&mut self, out: &mut Emitter) -> Result<(), PeError> {
        if self.results.is_empty() {
            return Ok(());
        }
        let s = stack_correlations(&self.results)?;
        let mut u = s.to_unit();
        u.metadata.insert("stage".into(), Value::from("stack"));
        out.emit_derived("o", u.payload, u.metadata, std::mem::take(&mut self.sources));
        Ok(())
    }
}

/// Zips observed and synthetic traces and emits a misfit record per pair.
struct Misfit {
    kind: MisfitKind,
    obs: VecDeque<DataUnit>,
    syn: VecDeque<DataUnit>,
}

impl ProcessingElement for Misfit {
    fn process(&mut self, port: &str, unit: &DataUnit, out: &mut Emitter) -> Result<(), PeError> {
        match port {
            "obs" => self.obs.push_back(unit.clone()),
            "syn" => self.syn.push_back(unit.clone()),
            other => return Err(PeError::new(format!("misfit has no input `{other}`"))),
        }
        while !self.obs.is_empty() && !self.syn.is_empty() {
            let (o, s) = (self.obs.pop_front().unwrap(), self.syn.pop_front().unwrap());
            let r = compute_misfit(&Trace::from_unit(&o)?, &Trace::from_unit(&s)?, self.kind)?;
            let mut rec = Metadata::new();
            rec.insert("kind".into(), Value::from(if self.kind == MisfitKind::L2 { "l2" } else { "ccShift" }));
            rec.insert("value".into(), Value::Float(r.value));
            if let Some(cc) = r.normalized_cc {
                rec.insert("normalizedCC".into(), Value::Float(cc));
            }
            let mut meta = Metadata::new();
            meta.insert("stage".into(), Value::from("misfit"));
            if let Some(st) = o.metadata.get("station") {
                meta.insert("station".into(), st.clone());
            }
            let sources = [o.prov_id, s.prov_id].into_iter().flatten().collect();
            out.emit_derived("o", Payload::Record(rec), meta, sources);
        }
        Ok(())
    }
}

fn transform_from_params(p: &Metadata) -> Result<Box<dyn ProcessingElement>, PeError> {
    let kind = param_str(p, "kind")?;
    Ok(Box::new(Transform { steps: vec![TransformKind::from_params(kind, p)?] }))
}

fn chain_from_params(p: &Metadata) -> Result<Box<dyn ProcessingElement>, PeError> {
    let Some(Value::List(items)) = p.get("steps") else {
        return Err(PeError::new("parameter `steps` must be an array"));
    };
    let steps = items.iter().map(TransformKind::from_value).collect::<Result<_, _>>()?;
    Ok(Box::new(Transform { steps }))
}

pub fn register(lib: &mut PeLibrary) {
    use ParamKind::*;
    lib.register(
        PeDescriptor::atomic("trace_window", "trace_window", &["i"], &["o"])
            .with_param("window_seconds", ParamSpec::required(Float)),
        |p| Ok(Box::new(Window { seconds: param_f64(p, "window_seconds")? })),
    );
    lib.register(
        PeDescriptor::atomic("trace_transform", "trace_transform", &["i"], &["o"])
            .with_param("kind", ParamSpec::required(String))
            .with_param("fraction", open(Float))
            .with_param("lo", open(Float))
            .with_param("hi", open(Float))
            .with_param("factor", open(Int)),
        transform_from_params,
    );
    lib.register(
        PeDescriptor::atomic("trace_chain", "trace_chain", &["i"], &["o"]).with_param("steps", ParamSpec::required(Array)),
        chain_from_params,
    );
    lib.register(
        PeDescriptor::atomic("xcorr", "xcorr", &["a", "b"], &["o"])
            .with_param("max_lag", ParamSpec::required(Int))
            .stateful(),
        |p| {
            let max_lag = param_i64(p, "max_lag")?;
            if max_lag < 0 {
                return Err(PeError::new("max_lag must be non-negative"));
            }
            Ok(Box::new(Correlate { max_lag: max_lag as usize, a: VecDeque::new(), b: VecDeque::new() }))
        },
    );
    lib.register(PeDescriptor::atomic("stack", "stack", &["i"], &["o"]).stateful(), |_| Ok(Box::new(Stack::default())));
    lib.register(
        PeDescriptor::atomic("misfit", "misfit", &["obs", "syn"], &["o"])
            .with_param("kind", ParamSpec::optional(String, "l2"))
            .stateful(),
        |p| {
            let kind = match param_str(p, "kind")? {
                "l2" => MisfitKind::L2,
                "ccShift" => MisfitKind::CcShift,
                other => return Err(PeError::new(format!("unknown misfit kind `{other}`"))),
            };
            Ok(Box::new(Misfit { kind, obs: VecDeque::new(), syn: VecDeque::new() }))
        },
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_splits_and_drops_tail() {
        let t = Trace::new("N.S.C", 0.5, 100.0, (0..9).map(f64::from).collect());
        let mut pe = Window { seconds: 2.0 };
        let mut out = Emitter::default();
        pe.process("i", &t.to_unit(), &mut out).unwrap();
        let ws = out.take();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1].payload, Payload::Array(vec![4.0, 5.0, 6.0, 7.0]));
        assert_eq!(ws[1].metadata["start_time"], Value::Float(102.0));
        assert_eq!(ws[1].metadata["window"], Value::Int(1));
    }

    #[test]
    fn chain_matches_direct_application() {
        let lib = PeLibrary::builtin();
        let steps = Value::List(vec![TransformKind::Demean.to_value(), TransformKind::Taper { fraction: 0.2 }.to_value()]);
        let mut pe = lib.instantiate("trace_chain", &[("steps".to_string(), steps)].into()).unwrap();
        let t = Trace::new("N.S.C", 0.1, 0.0, vec![1.0, 5.0, 2.0, 8.0, 3.0, 1.0, 0.0, 4.0, 2.0, 2.0]);
        let mut out = Emitter::default();
        pe.process("i", &t.to_unit(), &mut out).unwrap();
        let want = apply_trace_transform(
            &TransformKind::Taper { fraction: 0.2 },
            &apply_trace_transform(&TransformKind::Demean, &t).unwrap(),
        )
        .unwrap();
        assert_eq!(out.take()[0].payload, Payload::Array(want.samples));
    }
}
