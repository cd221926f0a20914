use serde::{Deserialize, Serialize};

use super::{SeismoError, Trace};
use crate::value::{DataUnit, Metadata, Payload, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorrelationResult {
    /// Seconds, `(k - maxLag) * dt`.
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    /// Channel ids `NET.STA.CHA` of the two inputs.
    pub pair: (String, String),
    pub window_count: u64,
    pub dt: f64,
}

impl CorrelationResult {
    pub fn max_lag(&self) -> usize {
        self.values.len() / 2
    }

    pub fn value_at_lag(&self, lag_samples: i64) -> Option<f64> {
        let k = lag_samples + self.max_lag() as i64;
        usize::try_from(k).ok().and_then(|k| self.values.get(k).copied())
    }

    pub fn pair_label(&self) -> String {
        format!("{}|{}", self.pair.0, self.pair.1)
    }

    pub fn to_unit(&self) -> DataUnit {
        let mut m = Metadata::new();
        m.insert("pair".into(), Value::from(self.pair_label()));
        m.insert("dt".into(), Value::Float(self.dt));
        m.insert("max_lag".into(), Value::Int(self.max_lag() as i64));
        m.insert("window_count".into(), Value::Int(self.window_count as i64));
        DataUnit::with_metadata(Payload::Array(self.values.clone()), m)
    }

    pub fn from_unit(unit: &DataUnit) -> Result<Self, SeismoError> {
        let Payload::Array(values) = &unit.payload else {
            return Err(SeismoError::Malformed("correlation payload must be an array".into()));
        };
        let m = &unit.metadata;
        let bad = |k: &str| SeismoError::Malformed(format!("correlation metadata missing `{k}`"));
        let pair = m.get("pair").and_then(Value::as_str).ok_or_else(|| bad("pair"))?;
        let (a, b) = pair.split_once('|').ok_or_else(|| bad("pair"))?;
        let dt = m.get("dt").and_then(Value::as_f64).ok_or_else(|| bad("dt"))?;
        let window_count = m.get("window_count").and_then(Value::as_i64).ok_or_else(|| bad("window_count"))?;
        if values.len() % 2 != 1 {
            return Err(SeismoError::Malformed("correlation length must be odd".into()));
        }
        let max_lag = values.len() / 2;
        Ok(CorrelationResult {
            lags: lag_grid(max_lag, dt),
            values: values.clone(),
            pair: (a.to_string(), b.to_string()),
            window_count: window_count.max(0) as u64,
            dt,
        })
    }
}

fn lag_grid(max_lag: usize, dt: f64) -> Vec<f64> {
    (0..2 * max_lag + 1).map(|k| (k as f64 - max_lag as f64) * dt).collect()
}

fn same_dt(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// `values[l] = sum_t a[t] * b[t + l]` for `l` in `[-max_lag, max_lag]`,
/// summed directly in ascending `t`.
pub fn cross_correlate(a: &Trace, b: &Trace, max_lag: usize) -> Result<CorrelationResult, SeismoError> {
    if !same_dt(a.dt, b.dt) {
        return Err(SeismoError::DtMismatch(a.dt, b.dt));
    }
    if a.len() <= max_lag || b.len() <= max_lag {
        return Err(SeismoError::TooShort(format!(
            "lengths {} and {} must exceed max lag {max_lag}",
            a.len(),
            b.len()
        )));
    }
    let (x, y) = (&a.samples, &b.samples);
    let (na, nb) = (x.len() as i64, y.len() as i64);
    let m = max_lag as i64;
    let mut values = Vec::with_capacity(2 * max_lag + 1);
    for l in -m..=m {
        let t0 = 0.max(-l);
        let t1 = na.min(nb - l);
        let mut acc = 0.0;
        for t in t0..t1 {
            acc += x[t as usize] * y[(t + l) as usize];
        }
        values.push(acc);
    }
    Ok(CorrelationResult {
        lags: lag_grid(max_lag, a.dt),
        values,
        pair: (a.id(), b.id()),
        window_count: 1,
        dt: a.dt,
    })
}

/// windowCount-weighted element-wise mean.
pub fn stack_correlations(results: &[CorrelationResult]) -> Result<CorrelationResult, SeismoError> {
    let first = results.first().ok_or(SeismoError::EmptyList)?;
    for r in results {
        if r.pair != first.pair {
            return Err(SeismoError::MixedPairs);
        }
        if r.lags != first.lags || r.values.len() != first.values.len() || !same_dt(r.dt, first.dt) {
            return Err(SeismoError::MixedLagGrids);
        }
    }
    let total: u64 = results.iter().map(|r| r.window_count).sum();
    let mut values = vec![0.0; first.values.len()];
    for r in results {
        let w = r.window_count as f64;
        for (acc, v) in values.iter_mut().zip(&r.values) {
            *acc += w * v;
        }
    }
    if total > 0 {
        for v in &mut values {
            *v /= total as f64;
        }
    }
    Ok(CorrelationResult { lags: first.lags.clone(), values, pair: first.pair.clone(), window_count: total, dt: first.dt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(id: &str, x: &[f64]) -> Trace {
        Trace::new(id, 0.5, 0.0, x.to_vec())
    }

    #[test]
    fn impulse_pair_peaks_at_plus_one() {
        let r = cross_correlate(&tr("N.A.Z", &[0.0, 1.0, 0.0, 0.0]), &tr("N.B.Z", &[0.0, 0.0, 1.0, 0.0]), 3).unwrap();
        let nonzero: Vec<(f64, f64)> =
            r.lags.iter().zip(&r.values).filter(|(_, v)| **v != 0.0).map(|(l, v)| (*l, *v)).collect();
        assert_eq!(nonzero, vec![(0.5, 1.0)]);
        assert_eq!(r.lags.len(), 7);
    }

    #[test]
    fn autocorrelation_example() {
        let a = tr("N.A.Z", &[1.0, 2.0, 3.0]);
        let r = cross_correlate(&a, &a, 1).unwrap();
        assert_eq!(r.values, vec![8.0, 14.0, 8.0]);
        assert_eq!(r.lags, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_partner_gives_zeros_and_errors_are_reported() {
        let r = cross_correlate(&tr("N.A.Z", &[1.0, -2.0, 3.0]), &tr("N.B.Z", &[0.0; 3]), 2).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        let mut b = tr("N.B.Z", &[0.0; 3]);
        b.dt = 0.25;
        assert!(matches!(cross_correlate(&tr("N.A.Z", &[0.0; 3]), &b, 1), Err(SeismoError::DtMismatch(..))));
        assert!(matches!(cross_correlate(&tr("N.A.Z", &[0.0; 3]), &tr("N.B.Z", &[0.0; 3]), 3), Err(SeismoError::TooShort(_))));
    }

    #[test]
    fn stack_rules() {
        let r = cross_correlate(&tr("N.A.Z", &[1.0, 2.0, 3.0]), &tr("N.B.Z", &[0.5, -1.0, 2.0]), 2).unwrap();
        let s = stack_correlations(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(s.values, r.values);
        assert_eq!(s.window_count, 2);
        let mut neg = r.clone();
        neg.values.iter_mut().for_each(|v| *v = -*v);
        assert!(stack_correlations(&[r.clone(), neg]).unwrap().values.iter().all(|v| *v == 0.0));
        let mut other = r.clone();
        other.pair.1 = "N.C.Z".into();
        assert_eq!(stack_correlations(&[r.clone(), other]), Err(SeismoError::MixedPairs));
        assert_eq!(stack_correlations(&[]), Err(SeismoError::EmptyList));
        let short = cross_correlate(&tr("N.A.Z", &[1.0, 2.0, 3.0]), &tr("N.B.Z", &[0.5, -1.0, 2.0]), 1).unwrap();
        assert_eq!(stack_correlations(&[r.clone(), short]), Err(SeismoError::MixedLagGrids));
        assert_eq!(CorrelationResult::from_unit(&r.to_unit()).unwrap(), r);
    }
}
