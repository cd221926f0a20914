//! Reproducible end-to-end demonstrations.
//!
//! `noise` correlates seeded synthetic channels that share a common noise
//! source through the all-pairs graph; `misfit` compares forward-modelled
//! seismograms against themselves and against a perturbed velocity model.
//! Both default to [`DEFAULT_SEED`].

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enactment::{BackendKind, Enactor, RunOptions, RunStatus};
use crate::error::{Error, Result};
use crate::graph::Node;
use crate::pe::builtin_descriptor;
use crate::seismo::{
    all_pairs_feeds, build_all_pairs_graph, compute_misfit, forward_simulate_1d, Boundary, CorrelationResult,
    MisfitKind, MisfitReport, Ricker, Trace, TransformKind, VelocityModel1D,
};
use crate::value::Value;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoiseConfig {
    pub channels: usize,
    pub windows: usize,
    pub window_seconds: f64,
    pub dt: f64,
    pub max_lag: usize,
    /// Standard deviation of the per-channel noise relative to the shared source.
    pub local_noise: f64,
    pub seed: u64,
    pub backend: BackendKind,
    pub workers: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            channels: 4,
            windows: 3,
            window_seconds: 25.0,
            dt: 0.05,
            max_lag: 40,
            local_noise: 0.5,
            seed: DEFAULT_SEED,
            backend: BackendKind::Sequential,
            workers: 2,
        }
    }
}

impl NoiseConfig {
    fn window_samples(&self) -> usize {
        (self.window_seconds / self.dt).round() as usize
    }
}

/// A shared Gaussian source seen by every channel with its own delay (at
/// most `max_lag / 2` samples) plus independent noise.
pub fn synthetic_channels(cfg: &NoiseConfig) -> Vec<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.windows * cfg.window_samples();
    let max_delay = cfg.max_lag / 2;
    let source: Vec<f64> = (0..n + max_delay).map(|_| rng.sample(StandardNormal)).collect();
    (0..cfg.channels)
        .map(|i| {
            let delay = rng.gen_range(0..=max_delay);
            let samples = (0..n).map(|k| source[k + delay] + cfg.local_noise * rng.sample::<f64, _>(StandardNormal)).collect();
            Trace::new(&format!("SF.N{i:03}.HHZ"), cfg.dt, 0.0, samples)
        })
        .collect()
}

/// Demean then a 5% taper on every window.
pub fn noise_prep_node() -> Node {
    let steps = vec![TransformKind::Demean.to_value(), TransformKind::Taper { fraction: 0.05 }.to_value()];
    Node::new(
        builtin_descriptor("trace_chain").expect("trace_chain is built in"),
        [("steps".to_string(), Value::List(steps))].into(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoiseReport {
    pub run_id: String,
    pub status: RunStatus,
    pub channels: Vec<String>,
    /// One per channel pair, ordered by pair.
    pub stacks: Vec<CorrelationResult>,
    /// Correlator activities recorded in provenance for this run.
    pub correlation_activities: usize,
    /// Distinct correlator instances among those activities.
    pub correlation_groups: usize,
}

pub fn run_noise(enactor: &Enactor, cfg: &NoiseConfig) -> Result<NoiseReport> {
    if cfg.windows == 0 || cfg.window_samples() == 0 {
        return Err(Error::Invalid("need at least one window of at least one sample".into()));
    }
    let traces = synthetic_channels(cfg);
    let ids: Vec<String> = traces.iter().map(Trace::id).collect();
    let (graph, layout) = build_all_pairs_graph(&ids, &noise_prep_node(), cfg.max_lag, cfg.window_seconds)?;
    let feeds = all_pairs_feeds(&layout, &traces)?;
    let opts = RunOptions { workers: cfg.workers.max(1), ..RunOptions::default() };
    let rec = enactor.execute(&graph, cfg.backend, opts, feeds)?;
    if rec.status != RunStatus::Completed {
        let why = rec.error_log.first().map(|e| format!("{}: {}", e.pe_instance, e.message)).unwrap_or_default();
        return Err(Error::Invalid(format!("noise run {} ended {}: {why}", rec.run_id, rec.status.as_str())));
    }
    let outputs = enactor.outputs(&rec.run_id)?;
    let mut stacks = Vec::with_capacity(layout.pairs.len());
    for stacker in layout.stacker_ids() {
        for unit in outputs.get(&format!("{stacker}.o")).into_iter().flatten() {
            stacks.push(CorrelationResult::from_unit(unit)?);
        }
    }
    let correlators: BTreeSet<&str> = layout.pairs.iter().map(|p| p.2.as_str()).collect();
    let activities: Vec<_> = enactor
        .provenance()
        .store()
        .activities_of_run(&rec.run_id)
        .into_iter()
        .filter(|a| correlators.contains(a.pe_instance.as_str()))
        .collect();
    let groups: BTreeSet<&str> = activities.iter().map(|a| a.pe_instance.as_str()).collect();
    Ok(NoiseReport {
        run_id: rec.run_id,
        status: rec.status,
        channels: ids,
        stacks,
        correlation_activities: activities.len(),
        correlation_groups: groups.len(),
    })
}

/// [`run_noise`] on a fresh in-memory enactor.
pub fn run_noise_in_memory(cfg: &NoiseConfig) -> Result<NoiseReport> {
    run_noise(&Enactor::in_memory(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MisfitConfig {
    pub length_meters: f64,
    pub dx: f64,
    pub velocity: f64,
    pub source_pos: f64,
    pub receivers: Vec<f64>,
    pub f0: f64,
    pub dt: f64,
    pub nt: usize,
    /// Relative velocity change inside the perturbed interval.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for MisfitConfig {
    fn default() -> Self {
        MisfitConfig {
            length_meters: 2000.0,
            dx: 5.0,
            velocity: 2000.0,
            source_pos: 200.0,
            receivers: vec![800.0, 1200.0, 1600.0],
            f0: 10.0,
            dt: 0.001,
            nt: 1000,
            perturbation: 0.05,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReceiverMisfit {
    pub channel: String,
    pub position: f64,
    /// Unperturbed synthetics against themselves.
    pub self_l2: MisfitReport,
    pub l2: MisfitReport,
    pub cc_shift: MisfitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MisfitDemoReport {
    /// Cells `[start, end)` whose velocity was perturbed.
    pub perturbed_cells: (usize, usize),
    pub receivers: Vec<ReceiverMisfit>,
}

/// The homogeneous model with a seeded interval between source and the
/// nearest receiver sped up (or slowed) by `perturbation`.
pub fn perturbed_model(cfg: &MisfitConfig, base: &VelocityModel1D) -> (VelocityModel1D, (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nearest = cfg.receivers.iter().copied().fold(cfg.length_meters, f64::min);
    let (lo, hi) = if nearest > cfg.source_pos { (cfg.source_pos, nearest) } else { (nearest, cfg.source_pos) };
    let (a, b) = ((lo / cfg.dx).ceil() as usize, (hi / cfg.dx).floor() as usize);
    let start = rng.gen_range(a..=a + (b - a) / 3);
    let end = rng.gen_range(start + (b - a) / 3..=b).max(start + 1);
    let mut model = base.clone();
    for c in &mut model.velocity[start..end] {
        *c *= 1.0 + cfg.perturbation;
    }
    (model, (start, end))
}

pub fn run_misfit(cfg: &MisfitConfig) -> Result<MisfitDemoReport> {
    let base = VelocityModel1D::homogeneous(cfg.length_meters, cfg.dx, cfg.velocity, Boundary::Absorbing);
    let source = Ricker { f0: cfg.f0, t0: 1.2 / cfg.f0, amplitude: 1.0 };
    let observed = forward_simulate_1d(&base, cfg.source_pos, &source, &cfg.receivers, cfg.dt, cfg.nt)?;
    let again = forward_simulate_1d(&base, cfg.source_pos, &source, &cfg.receivers, cfg.dt, cfg.nt)?;
    let (model, cells) = perturbed_model(cfg, &base);
    let perturbed = forward_simulate_1d(&model, cfg.source_pos, &source, &cfg.receivers, cfg.dt, cfg.nt)?;
    let receivers = observed
        .traces
        .iter()
        .zip(&again.traces)
        .zip(&perturbed.traces)
        .zip(&cfg.receivers)
        .map(|(((obs, same), syn), &position)| {
            Ok(ReceiverMisfit {
                channel: obs.id(),
                position,
                self_l2: compute_misfit(obs, same, MisfitKind::L2)?,
                l2: compute_misfit(obs, syn, MisfitKind::L2)?,
                cc_shift: compute_misfit(obs, syn, MisfitKind::CcShift)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MisfitDemoReport { perturbed_cells: cells, receivers })
}
