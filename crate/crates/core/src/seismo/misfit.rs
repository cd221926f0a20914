use serde::{Deserialize, Serialize};

use super::{cross_correlate, SeismoError, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MisfitKind {
    L2,
    CcShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MisfitReport {
    pub kind: MisfitKind,
    /// `0.5 sum (s - o)^2 dt` for l2; time shift in seconds for ccShift
    /// (positive when the synthetic lags the observation).
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_cc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<Vec<f64>>,
}

/// Both traces cut to their common time support.
fn common_support(obs: &Trace, syn: &Trace) -> Result<(Vec<f64>, Vec<f64>, f64), SeismoError> {
    if (obs.dt - syn.dt).abs() > 1e-12 * obs.dt.abs().max(syn.dt.abs()) {
        return Err(SeismoError::DtMismatch(obs.dt, syn.dt));
    }
    if obs.is_empty() || syn.is_empty() {
        return Err(SeismoError::NoOverlap);
    }
    let dt = obs.dt;
    let start = obs.start_time.max(syn.start_time);
    let end = obs.end_time().min(syn.end_time());
    if end < start - 1e-9 * dt {
        return Err(SeismoError::NoOverlap);
    }
    let offset = |t: &Trace| ((start - t.start_time) / dt).round() as usize;
    let (io, is) = (offset(obs), offset(syn));
    let n = (obs.len() - io).min(syn.len() - is);
    if n == 0 {
        return Err(SeismoError::NoOverlap);
    }
    Ok((obs.samples[io..io + n].to_vec(), syn.samples[is..is + n].to_vec(), dt))
}

pub fn compute_misfit(obs: &Trace, syn: &Trace, kind: MisfitKind) -> Result<MisfitReport, SeismoError> {
    let (o, s, dt) = common_support(obs, syn)?;
    match kind {
        MisfitKind::L2 => {
            let value = 0.5 * o.iter().zip(&s).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() * dt;
            Ok(MisfitReport { kind, value, normalized_cc: None, windows: None })
        }
        MisfitKind::CcShift => {
            let n = o.len();
            let eo: f64 = o.iter().map(|v| v * v).sum();
            let es: f64 = s.iter().map(|v| v * v).sum();
            let norm = (eo * es).sqrt();
            if norm == 0.0 {
                return Ok(MisfitReport { kind, value: 0.0, normalized_cc: Some(0.0), windows: None });
            }
            let max_lag = n - 1;
            let cc = cross_correlate(&Trace::new("..", dt, 0.0, o), &Trace::new("..", dt, 0.0, s), max_lag)?;
            // scan by increasing |lag| so ties keep the smaller shift
            let mut best_lag = 0i64;
            let mut best = f64::NEG_INFINITY;
            for a in 0..=max_lag as i64 {
                for l in if a == 0 { vec![0] } else { vec![-a, a] } {
                    let v = cc.values[(l + max_lag as i64) as usize] / norm;
                    if v > best {
                        best = v;
                        best_lag = l;
                    }
                }
            }
            Ok(MisfitReport {
                kind,
                value: best_lag as f64 * dt,
                normalized_cc: Some(best.clamp(-1.0, 1.0)),
                windows: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seismo::{ricker, Ricker};

    #[test]
    fn l2_examples() {
        let o = Trace::new("N.S.C", 1.0, 0.0, vec![1.0, 0.0, 0.0]);
        let s = Trace::new("N.S.C", 1.0, 0.0, vec![0.0; 3]);
        assert_eq!(compute_misfit(&o, &s, MisfitKind::L2).unwrap().value, 0.5);
        assert_eq!(compute_misfit(&o, &o, MisfitKind::L2).unwrap().value, 0.0);
    }

    #[test]
    fn cc_shift_recovers_delay() {
        let w = Ricker { f0: 5.0, t0: 0.3, amplitude: 1.0 };
        let obs: Vec<f64> = (0..200).map(|i| ricker(&w, i as f64 * 0.01)).collect();
        let mut syn = vec![0.0, 0.0];
        syn.extend_from_slice(&obs[..198]);
        let o = Trace::new("N.S.C", 0.01, 0.0, obs);
        let s = Trace::new("N.S.C", 0.01, 0.0, syn);
        let r = compute_misfit(&o, &s, MisfitKind::CcShift).unwrap();
        assert_eq!(r.value, 2.0 * 0.01);
        let same = compute_misfit(&o, &o, MisfitKind::CcShift).unwrap();
        assert_eq!(same.value, 0.0);
        assert!((same.normalized_cc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn support_errors() {
        let o = Trace::new("N.S.C", 1.0, 0.0, vec![1.0; 3]);
        let late = Trace::new("N.S.C", 1.0, 10.0, vec![1.0; 3]);
        assert_eq!(compute_misfit(&o, &late, MisfitKind::L2), Err(SeismoError::NoOverlap));
        let fine = Trace::new("N.S.C", 0.5, 0.0, vec![1.0; 3]);
        assert!(matches!(compute_misfit(&o, &fine, MisfitKind::L2), Err(SeismoError::DtMismatch(..))));
        let shifted = Trace::new("N.S.C", 1.0, 1.0, vec![1.0, 0.0, 0.0]);
        // overlap is t = 1..2
        assert_eq!(compute_misfit(&o, &shifted, MisfitKind::L2).unwrap().value, 0.5);
    }
}
