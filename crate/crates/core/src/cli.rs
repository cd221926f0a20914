//! Configuration and helpers behind the `seisflow` binary.
//!
//! Without a gateway URL every command works offline against a data
//! directory (see [`crate::datadir`]). With one, `run` and the `prov`
//! queries go through the gateway's HTTP interface instead.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::datadir::DataDir;
use crate::enactment::{BackendKind, Feeds, RunRecord};
use crate::error::{Error, Result};
use crate::gateway::{ErrorBody, RunSubmission, DEFAULT_DATA_DIR};
use crate::graph::{GraphDocument, WorkflowGraph};
use crate::registry::Registry;
use crate::seismo::{read_csv_trace, read_trace_file};
use crate::value::DataUnit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CliConfig {
    pub data_dir: PathBuf,
    pub gateway_url: Option<String>,
    pub token: Option<String>,
    pub backend: BackendKind,
    pub workers: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            data_dir: PathBuf::from(DEFAULT_DATA_DIR),
            gateway_url: None,
            token: None,
            backend: BackendKind::Sequential,
            workers: 2,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    /// Overrides from `SEISFLOW_DATA_DIR`, `SEISFLOW_GATEWAY_URL`,
    /// `SEISFLOW_TOKEN`, `SEISFLOW_BACKEND` and `SEISFLOW_WORKERS`.
    pub fn with_env(mut self, var: impl Fn(&str) -> Option<String>) -> Result<Self> {
        if let Some(d) = var("SEISFLOW_DATA_DIR") {
            self.data_dir = d.into();
        }
        if let Some(u) = var("SEISFLOW_GATEWAY_URL") {
            self.gateway_url = Some(u);
        }
        if let Some(t) = var("SEISFLOW_TOKEN") {
            self.token = Some(t);
        }
        if let Some(b) = var("SEISFLOW_BACKEND") {
            self.backend = b.parse().map_err(Error::Invalid)?;
        }
        if let Some(w) = var("SEISFLOW_WORKERS") {
            self.workers = w.parse().map_err(|_| Error::Invalid(format!("SEISFLOW_WORKERS: `{w}` is not a count")))?;
        }
        Ok(self)
    }

    pub fn data(&self) -> DataDir {
        DataDir::new(&self.data_dir)
    }

    pub fn remote(&self) -> Option<Remote> {
        self.gateway_url.as_ref().map(|u| Remote::new(u, self.token.clone()))
    }
}

/// A graph argument: an existing file, or else a registry reference.
pub fn graph_document(arg: &str, registry: &Registry, workspace: &str) -> Result<(GraphDocument, String)> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok((GraphDocument::parse(&text)?, workspace.to_string()));
    }
    let (rec, doc) = registry.graph_document(workspace, arg)?;
    Ok((doc, rec.workspace_id))
}

pub fn load_graph(arg: &str, registry: &Registry, workspace: &str) -> Result<WorkflowGraph> {
    let (doc, from) = graph_document(arg, registry, workspace)?;
    Ok(doc.resolve(&registry.resolver(&from))?)
}

/// A JSON map from feed name to units.
pub fn read_feeds(path: &Path) -> Result<Feeds> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// `feed=path` naming a trace file (`.csv` or the native format).
pub fn trace_feed(spec: &str) -> Result<(String, DataUnit)> {
    let (feed, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("expected FEED=PATH, got `{spec}`")))?;
    let path = Path::new(path);
    let trace = if path.extension().is_some_and(|x| x == "csv") { read_csv_trace(path)? } else { read_trace_file(path)? };
    Ok((feed.to_string(), trace.to_unit()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Blocking client for a running gateway.
#[derive(Debug, Clone)]
pub struct Remote {
    base: String,
    token: Option<String>,
}

impl Remote {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Remote { base: base.trim_end_matches('/').to_string(), token }
    }

    fn finish(&self, result: std::result::Result<ureq::Response, ureq::Error>) -> Result<Vec<u8>> {
        let read = |r: ureq::Response| -> Result<Vec<u8>> {
            let mut body = Vec::new();
            r.into_reader().read_to_end(&mut body).map_err(|e| Error::io(&self.base, e))?;
            Ok(body)
        };
        match result {
            Ok(r) => read(r),
            Err(ureq::Error::Status(status, r)) => {
                let body = read(r)?;
                let err: ErrorBody = serde_json::from_slice(&body).unwrap_or_else(|_| ErrorBody {
                    code: format!("Http{status}"),
                    message: String::from_utf8_lossy(&body).into_owned(),
                });
                Err(Error::Remote { status, code: err.code, message: err.message })
            }
            Err(e) => Err(Error::Remote { status: 0, code: "Unreachable".into(), message: e.to_string() }),
        }
    }

    pub fn get(&self, path: &str, query: &[(&str, &str)]) -> Result<Vec<u8>> {
        let mut req = ureq::get(&format!("{}{path}", self.base));
        for (k, v) in query {
            req = req.query(k, v);
        }
        self.finish(req.call())
    }

    pub fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>> {
        let mut req = ureq::post(&format!("{}{path}", self.base)).set("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.set("authorization", &format!("Bearer {t}"));
        }
        self.finish(req.send_bytes(body))
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str, query: &[(&str, &str)]) -> Result<T> {
        let body = self.get(path, query)?;
        serde_json::from_slice(&body).map_err(|e| Error::Invalid(format!("gateway response for {path}: {e}")))
    }

    /// Submit, then poll until the run is terminal or `timeout` passes.
    pub fn run(&self, submission: &RunSubmission, timeout: Duration) -> Result<(RunRecord, BTreeMap<String, Vec<DataUnit>>)> {
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Submitted {
            run_id: String,
        }
        let body = serde_json::to_vec(submission).expect("submission serializes");
        let sub: Submitted = serde_json::from_slice(&self.post("/runs", &body)?)
            .map_err(|e| Error::Invalid(format!("gateway response for /runs: {e}")))?;
        let started = Instant::now();
        let path = format!("/runs/{}", sub.run_id);
        loop {
            let rec: RunRecord = self.get_json(&path, &[])?;
            if rec.status.is_terminal() {
                let outputs = self.get_json(&format!("{path}/outputs"), &[])?;
                return Ok((rec, outputs));
            }
            if started.elapsed() > timeout {
                return Err(Error::Invalid(format!("run {} still {} after {timeout:?}", rec.run_id, rec.status.as_str())));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file_values() {
        let c = CliConfig { workers: 8, ..Default::default() }
            .with_env(|k| match k {
                "SEISFLOW_BACKEND" => Some("threaded".into()),
                "SEISFLOW_TOKEN" => Some("t".into()),
                _ => None,
            })
            .unwrap();
        assert_eq!((c.backend, c.workers, c.token.as_deref()), (BackendKind::Threaded, 8, Some("t")));
        assert!(CliConfig::default().with_env(|k| (k == "SEISFLOW_BACKEND").then(|| "gpu".into())).is_err());
        assert!(CliConfig::default().remote().is_none());
    }

    #[test]
    fn config_file_fields_are_camel_case() {
        let c: CliConfig = serde_json::from_str(r#"{"dataDir": "/d", "gatewayUrl": "http://h:1/"}"#).unwrap();
        assert_eq!(c.data_dir, PathBuf::from("/d"));
        assert_eq!(c.remote().unwrap().base, "http://h:1");
        assert_eq!(c.backend, BackendKind::Sequential);
    }
}
