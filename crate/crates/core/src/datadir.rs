//! On-disk layout shared by the command line and the gateway.
//!
//! ```text
//! <root>/prov.jsonl     provenance log
//! <root>/blobs/         content-addressed payloads
//! <root>/registry/      component registry
//! <root>/events/        run event mirrors, one JSON line per event
//! <root>/outputs/       run outputs written by `seisflow run`
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::blob::BlobStore;
use crate::enactment::Enactor;
use crate::error::Result;
use crate::provenance::{ProvStore, Provenance};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prov_log(&self) -> PathBuf {
        self.root.join("prov.jsonl")
    }

    pub fn blobs(&self) -> PathBuf {
        self.root.join("blobs")
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.root.join("registry")
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events")
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    /// Persistent provenance (at `prov_log`, or the default log) with blobs.
    pub fn open_provenance(&self, prov_log: Option<&Path>) -> Result<Provenance> {
        let log = prov_log.map(Path::to_path_buf).unwrap_or_else(|| self.prov_log());
        let store = ProvStore::open(&log)?;
        let blobs = BlobStore::open(self.blobs())?;
        Ok(Provenance::new(Arc::new(store)).with_blobs(Arc::new(blobs)))
    }

    pub fn open_enactor(&self, prov_log: Option<&Path>) -> Result<Enactor> {
        let prov = self.open_provenance(prov_log)?;
        Ok(Enactor::shared(Arc::new(prov)).with_event_log(self.events()))
    }

    pub fn open_registry(&self) -> Result<Registry> {
        Ok(Registry::open(self.registry_dir())?)
    }
}
