use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tracedoc::{read_csv_trace, read_trace_file};
use super::{SeismoError, Trace};
use crate::provenance::{ActivityInput, Provenance, RunSummary, StepOutput};
use crate::value::{Metadata, Payload, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum IngestFormat {
    TraceDoc,
    Csv,
}

impl IngestFormat {
    fn extension(self) -> &'static str {
        match self {
            IngestFormat::TraceDoc => "trc",
            IngestFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub cataloged: Vec<String>,
    /// (file name, reason)
    pub rejected: Vec<(String, String)>,
    /// Files whose payload was already catalogued.
    pub duplicates: Vec<String>,
}

/// Catalogue every `.trc` (or `.csv`) file directly under `path`.
///
/// Each new payload goes to the blob store and gets an entity carrying the
/// trace identity and time span. Files whose payload digest is already known
/// are skipped. Bad files are reported, never fatal.
pub fn ingest_directory(path: &Path, format: IngestFormat, prov: &Provenance) -> Result<IngestReport, SeismoError> {
    let entries = std::fs::read_dir(path).map_err(|e| SeismoError::PathUnreadable(format!("{}: {e}", path.display())))?;
    let mut files: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == format.extension()))
        .collect();
    files.sort();

    let mut report = IngestReport::default();
    let mut run_id: Option<String> = None;
    for (k, file) in files.iter().enumerate() {
        let name = file.file_name().unwrap_or_default().to_string_lossy().to_string();
        let parsed = match format {
            IngestFormat::TraceDoc => read_trace_file(file),
            IngestFormat::Csv => read_csv_trace(file),
        };
        let trace: Trace = match parsed {
            Ok(t) => t,
            Err(e) => {
                report.rejected.push((name, e.to_string()));
                continue;
            }
        };
        let payload = Payload::Array(trace.samples.clone());
        let digest = payload.digest();
        if !prov.store().entities_with_digest(&digest).is_empty() {
            report.duplicates.push(name);
            continue;
        }
        let run = match &run_id {
            Some(r) => r.clone(),
            None => {
                let r = format!("ingest-{}", prov.store().record_count());
                prov.store()
                    .begin_run(RunSummary {
                        run_id: r.clone(),
                        agent_id: "ingest".into(),
                        graph_ref: String::new(),
                        backend: "ingest".into(),
                        status: "completed".into(),
                        started_at: prov.now(),
                        ended_at: None,
                        metadata: [("source".to_string(), Value::from(path.display().to_string()))].into(),
                    })
                    .map_err(|e| SeismoError::Malformed(e.to_string()))?;
                run_id = Some(r.clone());
                r
            }
        };
        let mut metadata: Metadata = trace.metadata();
        metadata.insert("end_time".into(), Value::Float(trace.end_time()));
        metadata.insert("file".into(), Value::from(name.as_str()));
        metadata.insert("stage".into(), Value::from("raw"));
        let now = prov.now();
        let receipt = prov
            .record_step(
                ActivityInput {
                    activity_id: Some(format!("{run}/ingest/a{}", k + 1)),
                    run_id: run.clone(),
                    pe_instance: "ingest".into(),
                    pe_name: "ingest".into(),
                    pe_version: "1".into(),
                    parameters: [("file".to_string(), Value::from(name.as_str()))].into(),
                    started_at: now,
                    ended_at: now,
                    error_message: None,
                },
                &[],
                &[StepOutput {
                    entity_id: Some(format!("{run}/ingest/{name}")),
                    payload,
                    metadata,
                    sources: None,
                }],
            )
            .map_err(|e| SeismoError::Malformed(e.to_string()))?;
        report.cataloged.extend(receipt.output_ids);
    }
    if let Some(r) = run_id {
        let _ = prov.store().update_run(&r, "completed", Some(prov.now()));
    }
    Ok(report)
}

/// Rebuild a trace from an ingested entity's blob.
pub fn load_ingested(prov: &Provenance, entity_id: &str) -> Result<Trace, SeismoError> {
    let e = prov.store().entity(entity_id).ok_or_else(|| SeismoError::Malformed(format!("unknown entity {entity_id}")))?;
    let blobs = prov.blobs().ok_or_else(|| SeismoError::Malformed("no blob store attached".into()))?;
    let bytes = blobs.get(&e.payload_digest).map_err(|err| SeismoError::Malformed(err.to_string()))?;
    let payload = crate::value::decode_payload_bytes(&bytes).map_err(|err| SeismoError::Malformed(err.to_string()))?;
    Trace::from_unit(&crate::value::DataUnit::with_metadata(payload, e.metadata))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::blob::BlobStore;
    use crate::seismo::write_trace_file;

    #[test]
    fn five_good_one_truncated_then_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            let t = Trace::new(&format!("NET.STA{i}.HHZ"), 0.01, 100.0, vec![i as f64; 10]);
            write_trace_file(dir.path().join(format!("s{i}.trc")), &t).unwrap();
        }
        let bytes = super::super::tracedoc::encode_trace(&Trace::new("NET.BAD.HHZ", 0.01, 0.0, vec![1.0; 10]));
        std::fs::write(dir.path().join("bad.trc"), &bytes[..bytes.len() - 5]).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

        let prov = Provenance::in_memory().with_blobs(Arc::new(BlobStore::in_memory()));
        let r = ingest_directory(dir.path(), IngestFormat::TraceDoc, &prov).unwrap();
        assert_eq!(r.cataloged.len(), 5);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].0, "bad.trc");
        let again = ingest_directory(dir.path(), IngestFormat::TraceDoc, &prov).unwrap();
        assert!(again.cataloged.is_empty());
        assert_eq!(again.duplicates.len(), 5);

        let t = load_ingested(&prov, &r.cataloged[2]).unwrap();
        assert_eq!(t.id(), "NET.STA2.HHZ");
        assert_eq!(t.samples, vec![2.0; 10]);
    }

    #[test]
    fn empty_and_missing_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::in_memory();
        assert_eq!(ingest_directory(dir.path(), IngestFormat::Csv, &prov).unwrap(), IngestReport::default());
        assert!(matches!(
            ingest_directory(&dir.path().join("nope"), IngestFormat::Csv, &prov),
            Err(SeismoError::PathUnreadable(_))
        ));
    }
}
