use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::filter::{bandpass, lowpass};
use super::{SeismoError, Trace};
use crate::value::{Metadata, Value};

/// Spectral smoothing window for whitening, in frequency bins.
pub const WHITEN_BINS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Demean,
    Detrend,
    /// Hann ramps over `fraction` of the samples at each end.
    Taper { fraction: f64 },
    Bandpass { lo: f64, hi: f64 },
    Decimate { factor: usize },
    Whiten,
    Onebit,
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Demean => "demean",
            TransformKind::Detrend => "detrend",
            TransformKind::Taper { .. } => "taper",
            TransformKind::Bandpass { .. } => "bandpass",
            TransformKind::Decimate { .. } => "decimate",
            TransformKind::Whiten => "whiten",
            TransformKind::Onebit => "onebit",
        }
    }

    /// Build from a kind name and a parameter map (as found in graph documents).
    pub fn from_params(kind: &str, params: &Metadata) -> Result<Self, SeismoError> {
        let num = |k: &str| {
            params.get(k).and_then(Value::as_f64).ok_or_else(|| SeismoError::BadParams(format!("{kind} needs `{k}`")))
        };
        Ok(match kind {
            "demean" => TransformKind::Demean,
            "detrend" => TransformKind::Detrend,
            "taper" => TransformKind::Taper { fraction: num("fraction")? },
            "bandpass" => TransformKind::Bandpass { lo: num("lo")?, hi: num("hi")? },
            "decimate" => {
                let f = params
                    .get("factor")
                    .and_then(Value::as_i64)
                    .ok_or_else(|| SeismoError::BadParams("decimate needs integer `factor`".into()))?;
                if f < 2 {
                    return Err(SeismoError::BadParams(format!("decimate factor {f} < 2")));
                }
                TransformKind::Decimate { factor: f as usize }
            }
            "whiten" => TransformKind::Whiten,
            "onebit" => TransformKind::Onebit,
            other => return Err(SeismoError::BadParams(format!("unknown transform `{other}`"))),
        })
    }

    /// Parse a `{"kind": ..., ...}` value.
    pub fn from_value(v: &Value) -> Result<Self, SeismoError> {
        let Value::Map(m) = v else { return Err(SeismoError::BadParams("transform step must be a map".into())) };
        let kind = m.get("kind").and_then(Value::as_str).ok_or_else(|| SeismoError::BadParams("step needs `kind`".into()))?;
        Self::from_params(kind, m)
    }

    pub fn to_value(&self) -> Value {
        let mut m = Metadata::new();
        m.insert("kind".into(), Value::from(self.name()));
        match *self {
            TransformKind::Taper { fraction } => {
                m.insert("fraction".into(), Value::Float(fraction));
            }
            TransformKind::Bandpass { lo, hi } => {
                m.insert("lo".into(), Value::Float(lo));
                m.insert("hi".into(), Value::Float(hi));
            }
            TransformKind::Decimate { factor } => {
                m.insert("factor".into(), Value::Int(factor as i64));
            }
            _ => {}
        }
        Value::Map(m)
    }
}

fn need(trace: &Trace, n: usize, what: &str) -> Result<(), SeismoError> {
    if trace.len() < n {
        return Err(SeismoError::TooShort(format!("{what} needs {n} samples, trace has {}", trace.len())));
    }
    Ok(())
}

pub fn apply_trace_transform(kind: &TransformKind, trace: &Trace) -> Result<Trace, SeismoError> {
    if !(trace.dt > 0.0) {
        return Err(SeismoError::BadParams(format!("dt must be positive, got {}", trace.dt)));
    }
    let x = &trace.samples;
    match *kind {
        TransformKind::Demean => {
            need(trace, 1, "demean")?;
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            Ok(trace.with_samples(x.iter().map(|v| v - mean).collect()))
        }
        TransformKind::Detrend => {
            need(trace, 2, "detrend")?;
            Ok(trace.with_samples(detrend(x)))
        }
        TransformKind::Taper { fraction } => {
            if !(fraction > 0.0 && fraction <= 0.5) {
                return Err(SeismoError::BadParams(format!("taper fraction {fraction} not in (0, 0.5]")));
            }
            need(trace, 2, "taper")?;
            Ok(trace.with_samples(taper(x, fraction)))
        }
        TransformKind::Bandpass { lo, hi } => {
            let nyquist = 0.5 / trace.dt;
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return Err(SeismoError::BadParams(format!("bandpass needs 0 < {lo} < {hi} < {nyquist}")));
            }
            need(trace, 3, "bandpass")?;
            Ok(trace.with_samples(bandpass(x, trace.dt, lo, hi)))
        }
        TransformKind::Decimate { factor } => {
            if factor < 2 {
                return Err(SeismoError::BadParams(format!("decimate factor {factor} < 2")));
            }
            need(trace, factor, "decimate")?;
            // anti-alias at 80% of the new Nyquist
            let fc = 0.8 * 0.5 / (trace.dt * factor as f64);
            let y = lowpass(x, trace.dt, fc);
            let mut out = trace.with_samples(y.into_iter().step_by(factor).collect());
            out.dt = trace.dt * factor as f64;
            Ok(out)
        }
        TransformKind::Whiten => {
            need(trace, 2, "whiten")?;
            Ok(trace.with_samples(whiten(x)))
        }
        TransformKind::Onebit => Ok(trace.with_samples(x.iter().map(|&v| sign(v)).collect())),
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Remove the least-squares line.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let ym = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in x.iter().enumerate() {
        let d = i as f64 - tm;
        sxy += d * (y - ym);
        sxx += d * d;
    }
    let slope = sxy / sxx;
    x.iter().enumerate().map(|(i, &y)| y - ym - slope * (i as f64 - tm)).collect()
}

fn taper(x: &[f64], fraction: f64) -> Vec<f64> {
    let n = x.len();
    let m = ((fraction * n as f64).floor() as usize).max(1).min(n / 2);
    let mut y = x.to_vec();
    for i in 0..m {
        let w = 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / m as f64).cos());
        y[i] *= w;
        y[n - 1 - i] *= w;
    }
    y
}

/// Divide the spectrum by its moving-average magnitude, keeping phase.
fn whiten(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf.iter().map(|c| c.norm()).collect();
    let half = (WHITEN_BINS / 2) as isize;
    let count = WHITEN_BINS.min(n);
    let smooth: Vec<f64> = (0..n as isize)
        .map(|k| {
            let s: f64 = (-half..=half)
                .take(count)
                .map(|d| mag[(k + d).rem_euclid(n as isize) as usize])
                .sum();
            s / count as f64
        })
        .collect();
    let floor = smooth.iter().copied().fold(0.0, f64::max) * 1e-12;
    for (c, s) in buf.iter_mut().zip(&smooth) {
        *c = if *s > floor && *s > 0.0 { *c / *s } else { Complex::new(0.0, 0.0) };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}
