//! Second-order leapfrog solver for `u_tt = c(x)^2 u_xx + s(t) delta(x - xs)`.
//!
//! Nodes sit at `x_i = i dx`, `i = 0..=N`; node `i` takes the velocity of
//! cell `min(i, N - 1)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Boundary, SeismoError, Trace, VelocityModel1D};

/// Highest frequency with significant Ricker energy, as a multiple of `f0`.
pub const RICKER_FMAX_FACTOR: f64 = 2.5;
/// Required grid points per minimum wavelength.
pub const MIN_POINTS_PER_WAVELENGTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Ricker {
    pub f0: f64,
    pub t0: f64,
    pub amplitude: f64,
}

pub fn ricker(w: &Ricker, t: f64) -> f64 {
    let a = (PI * w.f0 * (t - w.t0)).powi(2);
    w.amplitude * (1.0 - 2.0 * a) * (-a).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub traces: Vec<Trace>,
    /// Discrete energy at each half step `n + 1/2`, `n = 0..nt-1`:
    /// `sum w_i (du_i/dt)^2 / c_i^2 + sum (du_{i+1/2}^{n+1} du_{i+1/2}^n) / dx^2`.
    /// Conserved exactly (up to rounding) by the scheme with reflecting ends and no source.
    pub energy: Vec<f64>,
}

fn node_index(model: &VelocityModel1D, x: f64) -> Result<usize, SeismoError> {
    if !(0.0..=model.length_meters).contains(&x) {
        return Err(SeismoError::OutOfDomain(x));
    }
    Ok(((x / model.dx).round() as usize).min(model.velocity.len()))
}

pub fn forward_simulate_1d(
    model: &VelocityModel1D,
    source_pos: f64,
    source: &Ricker,
    receivers: &[f64],
    dt: f64,
    nt: usize,
) -> Result<Simulation, SeismoError> {
    model.check()?;
    if !(dt > 0.0) {
        return Err(SeismoError::BadParams(format!("dt must be positive, got {dt}")));
    }
    if !(source.f0 > 0.0) {
        return Err(SeismoError::BadParams(format!("f0 must be positive, got {}", source.f0)));
    }
    let cmax = model.velocity.iter().copied().fold(0.0, f64::max);
    let cmin = model.velocity.iter().copied().fold(f64::INFINITY, f64::min);
    let courant = cmax * dt / model.dx;
    if courant > 1.0 {
        return Err(SeismoError::CflViolation(courant));
    }
    let points = cmin / (RICKER_FMAX_FACTOR * source.f0) / model.dx;
    if points < MIN_POINTS_PER_WAVELENGTH {
        return Err(SeismoError::UnresolvedWavelength(points));
    }
    let src = node_index(model, source_pos)?;
    let recv: Vec<usize> = receivers.iter().map(|&x| node_index(model, x)).collect::<Result<_, _>>()?;

    let cells = model.velocity.len();
    let n = cells + 1;
    let c: Vec<f64> = (0..n).map(|i| model.velocity[i.min(cells - 1)]).collect();
    let r2: Vec<f64> = c.iter().map(|ci| (ci * dt / model.dx).powi(2)).collect();
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };

    let mut prev = vec![0.0; n];
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(nt); recv.len()];
    let mut energy = Vec::with_capacity(nt);
    let inject = dt * dt / model.dx;

    for step in 0..nt {
        for (k, &i) in recv.iter().enumerate() {
            samples[k].push(cur[i]);
        }
        let s = ricker(source, step as f64 * dt);
        for i in 1..n - 1 {
            next[i] = 2.0 * cur[i] - prev[i] + r2[i] * (cur[i + 1] - 2.0 * cur[i] + cur[i - 1]);
        }
        match model.boundary {
            Boundary::Reflecting => {
                next[0] = 2.0 * cur[0] - prev[0] + r2[0] * 2.0 * (cur[1] - cur[0]);
                let l = n - 1;
                next[l] = 2.0 * cur[l] - prev[l] + r2[l] * 2.0 * (cur[l - 1] - cur[l]);
            }
            Boundary::Absorbing => {
                let k0 = (c[0] * dt - model.dx) / (c[0] * dt + model.dx);
                next[0] = cur[1] + k0 * (next[1] - cur[0]);
                let l = n - 1;
                let kl = (c[l] * dt - model.dx) / (c[l] * dt + model.dx);
                next[l] = cur[l - 1] + kl * (next[l - 1] - cur[l]);
            }
        }
        // a boundary node holds half a cell
        next[src] += inject * s / weight(src);

        let mut e = 0.0;
        for i in 0..n {
            let v = (next[i] - cur[i]) / dt;
            e += weight(i) * v * v / (c[i] * c[i]);
        }
        for i in 0..n - 1 {
            e += (next[i + 1] - next[i]) * (cur[i + 1] - cur[i]) / (model.dx * model.dx);
        }
        energy.push(e);

        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
    }

    let traces = samples
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut t = Trace::new(&format!("SY.R{k:02}.HXZ"), dt, 0.0, s);
            t.units = "m".into();
            t
        })
        .collect();
    Ok(Simulation { traces, energy })
}

/// Time of the first sample whose magnitude exceeds `fraction` of the trace peak.
pub fn first_arrival(trace: &Trace, fraction: f64) -> Option<f64> {
    let peak = trace.samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    trace
        .samples
        .iter()
        .position(|v| v.abs() > fraction * peak)
        .map(|i| trace.start_time + i as f64 * trace.dt)
}

/// Onset, by the same threshold rule, of the 1D Green's-function waveform of
/// the source: the running integral of the wavelet.
pub fn source_onset(source: &Ricker, dt: f64, nt: usize, fraction: f64) -> Option<f64> {
    let mut acc = 0.0;
    let g: Vec<f64> = (0..nt)
        .map(|i| {
            acc += ricker(source, i as f64 * dt) * dt;
            acc
        })
        .collect();
    first_arrival(&Trace::new("..", dt, 0.0, g), fraction)
}
