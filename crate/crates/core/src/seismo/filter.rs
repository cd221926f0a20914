//! Recursive Butterworth filters built from second-order sections.

use std::f64::consts::PI;

/// Normalized second-order section (a0 = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

/// Pole quality factors of a 4th-order Butterworth: 1 / (2 cos(k pi / 8)), k = 1, 3.
fn butterworth4_q() -> [f64; 2] {
    [1.0 / (2.0 * (PI / 8.0).cos()), 1.0 / (2.0 * (3.0 * PI / 8.0).cos())]
}

impl Biquad {
    fn lowpass(fc: f64, dt: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc * dt;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - c) / 2.0 / a0,
            b1: (1.0 - c) / a0,
            b2: (1.0 - c) / 2.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn highpass(fc: f64, dt: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc * dt;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + c) / 2.0 / a0,
            b1: -(1.0 + c) / a0,
            b2: (1.0 + c) / 2.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Transposed direct form II, zero initial state.
    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b0 * *v + z1;
            z1 = self.b1 * *v - self.a1 * y + z2;
            z2 = self.b2 * *v - self.a2 * y;
            *v = y;
        }
    }
}

fn butter4_lowpass(fc: f64, dt: f64) -> Vec<Biquad> {
    butterworth4_q().iter().map(|&q| Biquad::lowpass(fc, dt, q)).collect()
}

fn butter4_highpass(fc: f64, dt: f64) -> Vec<Biquad> {
    butterworth4_q().iter().map(|&q| Biquad::highpass(fc, dt, q)).collect()
}

/// Forward then backward through all sections: zero phase, squared magnitude.
fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        s.run(&mut y);
    }
    y.reverse();
    for s in sections {
        s.run(&mut y);
    }
    y.reverse();
    y
}

/// Zero-phase 4th-order Butterworth band-pass between `lo` and `hi` Hz.
pub fn bandpass(x: &[f64], dt: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut sections = butter4_highpass(lo, dt);
    sections.extend(butter4_lowpass(hi, dt));
    filtfilt(&sections, x)
}

/// Zero-phase 4th-order Butterworth low-pass at `fc` Hz.
pub fn lowpass(x: &[f64], dt: f64, fc: f64) -> Vec<f64> {
    filtfilt(&butter4_lowpass(fc, dt), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    /// Two-pass bilinear Butterworth power response, written from the analog prototype.
    fn oracle_gain(f: f64, dt: f64, lo: f64, hi: f64) -> f64 {
        let w = |x: f64| (PI * x * dt).tan();
        let hp = 1.0 / (1.0 + (w(lo) / w(f)).powi(8));
        let lp = 1.0 / (1.0 + (w(f) / w(hi)).powi(8));
        hp * lp
    }

    fn spectral_filter(x: &[f64], dt: f64, lo: f64, hi: f64) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            let kk = if k <= n / 2 { k } else { n - k };
            let f = kk as f64 / (n as f64 * dt);
            *c *= if kk == 0 { 0.0 } else { oracle_gain(f, dt, lo, hi) };
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn matches_spectral_oracle_away_from_edges() {
        let dt = 0.01;
        let n = 4000;
        for f in [0.5, 2.0, 5.0, 12.0, 30.0] {
            // whole cycles so the oracle's circular spectrum has no leakage
            let cycles = (f * n as f64 * dt).round();
            let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * cycles * i as f64 / n as f64).sin()).collect();
            let got = bandpass(&x, dt, 1.0, 8.0);
            let want = spectral_filter(&x, dt, 1.0, 8.0);
            let mid = n / 4..3 * n / 4;
            let ratio_got = rms(&got[mid.clone()]) / rms(&x[mid.clone()]);
            let ratio_want = rms(&want[mid.clone()]) / rms(&x[mid]);
            assert!((ratio_got - ratio_want).abs() < 1e-3, "f={f}: {ratio_got} vs {ratio_want}");
        }
    }
}
