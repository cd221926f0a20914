//! Seismology: traces, pre-processing transforms, noise cross-correlation and
//! stacking, a 1D finite-difference forward solver, misfit measures, the
//! `.trc` trace document and directory ingest.

mod allpairs;
mod fd1d;
mod filter;
mod ingest;
mod misfit;
pub mod pes;
mod tracedoc;
mod transforms;
mod xcorr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{DataUnit, Metadata, Payload, Value};

pub use allpairs::{all_pairs_feeds, build_all_pairs_graph, correlator_id, pair_count, AllPairsLayout};
pub use fd1d::{first_arrival, forward_simulate_1d, ricker, source_onset, Ricker, Simulation};
pub use filter::{bandpass, lowpass, Biquad};
pub use ingest::{ingest_directory, load_ingested, IngestFormat, IngestReport};
pub use misfit::{compute_misfit, MisfitKind, MisfitReport};
pub use tracedoc::{read_csv_trace, read_trace_file, write_trace_file, TraceHeader};
pub use transforms::{apply_trace_transform, TransformKind};
pub use xcorr::{cross_correlate, stack_correlations, CorrelationResult};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SeismoError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("trace too short: {0}")]
    TooShort(String),
    #[error("sample intervals differ: {0} vs {1}")]
    DtMismatch(f64, f64),
    #[error("correlations belong to different pairs")]
    MixedPairs,
    #[error("correlations use different lag grids")]
    MixedLagGrids,
    #[error("nothing to stack")]
    EmptyList,
    #[error("need at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("CFL violated: c*dt/dx = {0}")]
    CflViolation(f64),
    #[error("wavelength unresolved: {0:.2} points per minimum wavelength (need 10)")]
    UnresolvedWavelength(f64),
    #[error("position {0} m outside the model")]
    OutOfDomain(f64),
    #[error("traces do not overlap in time")]
    NoOverlap,
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("unreadable path {0}")]
    PathUnreadable(String),
}

impl SeismoError {
    pub fn code(&self) -> &'static str {
        match self {
            SeismoError::BadParams(_) => "BadParams",
            SeismoError::TooShort(_) => "TooShort",
            SeismoError::DtMismatch(..) => "DtMismatch",
            SeismoError::MixedPairs => "MixedPairs",
            SeismoError::MixedLagGrids => "MixedLagGrids",
            SeismoError::EmptyList => "EmptyList",
            SeismoError::TooFewChannels(_) => "TooFewChannels",
            SeismoError::CflViolation(_) => "CFLViolation",
            SeismoError::UnresolvedWavelength(_) => "UnresolvedWavelength",
            SeismoError::OutOfDomain(_) => "OutOfDomain",
            SeismoError::NoOverlap => "NoOverlap",
            SeismoError::Malformed(_) => "Malformed",
            SeismoError::PathUnreadable(_) => "PathUnreadable",
        }
    }
}

/// Uniformly sampled time series from one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub samples: Vec<f64>,
    /// Seconds per sample.
    pub dt: f64,
    /// Epoch seconds of the first sample.
    pub start_time: f64,
    pub network: String,
    pub station: String,
    pub channel: String,
    pub units: String,
}

impl Trace {
    pub fn new(id: &str, dt: f64, start_time: f64, samples: Vec<f64>) -> Self {
        let mut parts = id.splitn(3, '.');
        let network = parts.next().unwrap_or_default().to_string();
        let station = parts.next().unwrap_or_default().to_string();
        let channel = parts.next().unwrap_or_default().to_string();
        Trace { samples, dt, start_time, network, station, channel, units: "counts".into() }
    }

    /// `NET.STA.CHA`
    pub fn id(&self) -> String {
        format!("{}.{}.{}", self.network, self.station, self.channel)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.dt * self.samples.len().saturating_sub(1) as f64
    }

    pub fn with_samples(&self, samples: Vec<f64>) -> Trace {
        Trace { samples, ..self.clone_header() }
    }

    fn clone_header(&self) -> Trace {
        Trace {
            samples: Vec::new(),
            dt: self.dt,
            start_time: self.start_time,
            network: self.network.clone(),
            station: self.station.clone(),
            channel: self.channel.clone(),
            units: self.units.clone(),
        }
    }

    /// Samples in `[start, end]`, snapped outward to the sample grid.
    pub fn trim(&self, start: f64, end: f64) -> Option<Trace> {
        if end < start || self.samples.is_empty() || end < self.start_time || start > self.end_time() {
            return None;
        }
        let i0 = ((start - self.start_time) / self.dt).floor().max(0.0) as usize;
        let i1 = (((end - self.start_time) / self.dt).ceil() as usize).min(self.samples.len() - 1);
        let mut t = self.with_samples(self.samples[i0..=i1].to_vec());
        t.start_time = self.start_time + i0 as f64 * self.dt;
        Some(t)
    }

    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("network".into(), Value::from(self.network.as_str()));
        m.insert("station".into(), Value::from(format!("{}.{}", self.network, self.station)));
        m.insert("channel".into(), Value::from(self.id()));
        m.insert("dt".into(), Value::Float(self.dt));
        m.insert("start_time".into(), Value::Float(self.start_time));
        m.insert("units".into(), Value::from(self.units.as_str()));
        m
    }

    /// Array payload plus identity metadata.
    pub fn to_unit(&self) -> DataUnit {
        DataUnit::with_metadata(Payload::Array(self.samples.clone()), self.metadata())
    }

    pub fn from_unit(unit: &DataUnit) -> Result<Trace, SeismoError> {
        let Payload::Array(samples) = &unit.payload else {
            return Err(SeismoError::Malformed(format!("expected array payload, got {}", unit.payload.kind_name())));
        };
        let m = &unit.metadata;
        let dt = m.get("dt").and_then(Value::as_f64).ok_or_else(|| SeismoError::Malformed("missing dt".into()))?;
        let start_time = m.get("start_time").and_then(Value::as_f64).unwrap_or(0.0);
        let id = m.get("channel").and_then(Value::as_str).unwrap_or("..");
        let mut t = Trace::new(id, dt, start_time, samples.clone());
        if let Some(u) = m.get("units").and_then(Value::as_str) {
            t.units = u.to_string();
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StationMeta {
    pub network: String,
    pub station: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Meters.
    pub elevation: f64,
}

impl StationMeta {
    pub fn check(&self) -> Result<(), SeismoError> {
        check_coords(self.latitude, self.longitude)
    }
}

/// Catalog event in the usual centroid-moment-tensor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventRecord {
    pub event_id: String,
    /// Epoch seconds.
    pub origin_time: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub depth_km: f64,
    pub magnitude: f64,
    /// Mrr, Mtt, Mpp, Mrt, Mrp, Mtp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_tensor: Option<[f64; 6]>,
    /// Free-text region name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

impl EventRecord {
    pub fn check(&self) -> Result<(), SeismoError> {
        check_coords(self.latitude, self.longitude)?;
        if !(self.depth_km >= 0.0) || !self.magnitude.is_finite() {
            return Err(SeismoError::BadParams(format!("event {}: bad depth or magnitude", self.event_id)));
        }
        Ok(())
    }
}

fn check_coords(lat: f64, lon: f64) -> Result<(), SeismoError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(SeismoError::BadParams(format!("coordinates ({lat}, {lon}) out of range")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero-gradient ends: waves reflect and energy is conserved.
    Reflecting,
    /// First-order Mur ends.
    Absorbing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VelocityModel1D {
    pub length_meters: f64,
    pub dx: f64,
    /// m/s per cell.
    pub velocity: Vec<f64>,
    pub boundary: Boundary,
}

impl VelocityModel1D {
    pub fn homogeneous(length_meters: f64, dx: f64, c: f64, boundary: Boundary) -> Self {
        let n = (length_meters / dx).round() as usize;
        VelocityModel1D { length_meters, dx, velocity: vec![c; n], boundary }
    }

    pub fn check(&self) -> Result<(), SeismoError> {
        if !(self.dx > 0.0) || !(self.length_meters > 0.0) {
            return Err(SeismoError::BadParams("dx and length must be positive".into()));
        }
        let cells = self.length_meters / self.dx;
        if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) || cells.round() as usize != self.velocity.len() {
            return Err(SeismoError::BadParams(format!(
                "velocity has {} cells, length/dx = {cells}",
                self.velocity.len()
            )));
        }
        if self.velocity.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(SeismoError::BadParams("velocities must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_unit_round_trip() {
        let mut t = Trace::new("NET.STA1.HHZ", 0.01, 1000.0, vec![1.0, 2.0]);
        t.units = "m/s".into();
        let back = Trace::from_unit(&t.to_unit()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn trim_snaps_to_grid() {
        let t = Trace::new("N.S.C", 0.5, 10.0, (0..20).map(f64::from).collect());
        let w = t.trim(12.2, 13.0).unwrap();
        assert_eq!(w.start_time, 12.0);
        assert_eq!(w.samples, vec![4.0, 5.0, 6.0]);
        assert!(t.trim(0.0, 5.0).is_none());
    }

    #[test]
    fn model_cell_count_checked() {
        assert!(VelocityModel1D::homogeneous(100.0, 10.0, 1000.0, Boundary::Reflecting).check().is_ok());
        let mut m = VelocityModel1D::homogeneous(100.0, 10.0, 1000.0, Boundary::Reflecting);
        m.velocity.pop();
        assert!(m.check().is_err());
    }
}
