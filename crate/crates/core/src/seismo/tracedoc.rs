//! `.trc` documents: `TRC1`, u32 LE header length, JSON header, f64 LE samples.
//! Hand-made fixtures can instead be `time,value` CSV with a `<stem>.meta.json` sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SeismoError, Trace};
use crate::value::{bytes_to_f64s, f64s_to_bytes};

const MAGIC: &[u8; 4] = b"TRC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceHeader {
    pub network: String,
    pub station: String,
    pub channel: String,
    pub dt: f64,
    pub start_time: f64,
    pub units: String,
    pub sample_count: u64,
}

pub fn encode_trace(trace: &Trace) -> Vec<u8> {
    let header = TraceHeader {
        network: trace.network.clone(),
        station: trace.station.clone(),
        channel: trace.channel.clone(),
        dt: trace.dt,
        start_time: trace.start_time,
        units: trace.units.clone(),
        sample_count: trace.len() as u64,
    };
    let json = serde_json::to_vec(&header).expect("trace header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * trace.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&f64s_to_bytes(&trace.samples));
    out
}

pub fn decode_trace(bytes: &[u8]) -> Result<Trace, SeismoError> {
    let bad = |m: &str| SeismoError::Malformed(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing TRC1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: TraceHeader = serde_json::from_slice(body).map_err(|e| SeismoError::Malformed(format!("header: {e}")))?;
    let data = &bytes[8 + hlen..];
    if data.len() as u64 != h.sample_count * 8 {
        return Err(SeismoError::Malformed(format!(
            "expected {} samples, found {} bytes",
            h.sample_count,
            data.len()
        )));
    }
    if !(h.dt > 0.0) {
        return Err(bad("dt must be positive"));
    }
    let samples = bytes_to_f64s(data).ok_or_else(|| bad("sample block"))?;
    Ok(Trace {
        samples,
        dt: h.dt,
        start_time: h.start_time,
        network: h.network,
        station: h.station,
        channel: h.channel,
        units: h.units,
    })
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &Trace) -> std::io::Result<()> {
    std::fs::write(path, encode_trace(trace))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Trace, SeismoError> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| SeismoError::Malformed(format!("{}: {e}", path.as_ref().display())))?;
    decode_trace(&bytes)
}

#[derive(Debug, Deserialize)]
struct Sidecar {
    network: String,
    station: String,
    channel: String,
    #[serde(default = "default_units")]
    units: String,
}

fn default_units() -> String {
    "counts".into()
}

/// Read `time,value` rows; identity comes from the sidecar next to the file.
pub fn read_csv_trace(path: impl AsRef<Path>) -> Result<Trace, SeismoError> {
    let path = path.as_ref();
    let sidecar_path = path.with_extension("meta.json");
    let side: Sidecar = serde_json::from_slice(
        &std::fs::read(&sidecar_path)
            .map_err(|e| SeismoError::Malformed(format!("sidecar {}: {e}", sidecar_path.display())))?,
    )
    .map_err(|e| SeismoError::Malformed(format!("sidecar: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SeismoError::Malformed(e.to_string()))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for row in reader.deserialize::<(f64, f64)>() {
        let (t, v) = row.map_err(|e| SeismoError::Malformed(e.to_string()))?;
        times.push(t);
        values.push(v);
    }
    if times.len() < 2 {
        return Err(SeismoError::TooShort("csv trace needs at least 2 rows".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(SeismoError::Malformed("time must increase".into()));
    }
    for (i, t) in times.iter().enumerate() {
        let want = times[0] + i as f64 * dt;
        if (t - want).abs() > 1e-6 * dt.max(1.0) {
            return Err(SeismoError::Malformed(format!("row {} breaks uniform sampling", i + 1)));
        }
    }
    Ok(Trace {
        samples: values,
        dt,
        start_time: times[0],
        network: side.network,
        station: side.station,
        channel: side.channel,
        units: side.units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trc_round_trip_and_truncation() {
        let t = Trace::new("NET.STA1.HHZ", 0.01, 1.5e9, vec![1.0, -2.5, f64::MIN_POSITIVE]);
        let bytes = encode_trace(&t);
        assert_eq!(decode_trace(&bytes).unwrap(), t);
        assert!(matches!(decode_trace(&bytes[..bytes.len() - 3]), Err(SeismoError::Malformed(_))));
        assert!(decode_trace(b"NOPE").is_err());
    }

    #[test]
    fn csv_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "time,value\n10.0,1\n10.5,2\n11.0,3\n").unwrap();
        std::fs::write(dir.path().join("a.meta.json"), r#"{"network":"NET","station":"STA2","channel":"HHZ"}"#)
            .unwrap();
        let t = read_csv_trace(&p).unwrap();
        assert_eq!(t.dt, 0.5);
        assert_eq!(t.start_time, 10.0);
        assert_eq!(t.id(), "NET.STA2.HHZ");
        std::fs::write(&p, "time,value\n10.0,1\n10.5,2\n12.0,3\n").unwrap();
        assert!(read_csv_trace(&p).is_err());
    }
}
