//! One error type over every module, for callers that drive several of them
//! (the command line, the FFI layer). `code()` is the module's own code.

use thiserror::Error;

use crate::blob::BlobError;
use crate::enactment::EnactError;
use crate::gateway::GatewayError;
use crate::graph::GraphError;
use crate::provenance::ProvError;
use crate::registry::RegistryError;
use crate::seismo::SeismoError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Enact(#[from] EnactError),
    #[error(transparent)]
    Prov(#[from] ProvError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Seismo(#[from] SeismoError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    /// A remote gateway answered with an error body.
    #[error("gateway returned {status}: {message}")]
    Remote { status: u16, code: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn code(&self) -> &str {
        match self {
            Error::Graph(e) => e.code(),
            Error::Enact(e) => e.code(),
            Error::Prov(e) => e.code(),
            Error::Registry(e) => e.code(),
            Error::Seismo(e) => e.code(),
            Error::Blob(BlobError::NotFound(_)) => "BlobNotFound",
            Error::Blob(BlobError::Corrupt { .. }) => "BlobCorrupt",
            Error::Blob(BlobError::Io(_)) => "Io",
            Error::Gateway(e) => e.code(),
            Error::Remote { code, .. } => code,
            Error::Io { .. } => "Io",
            Error::Invalid(_) => "InvalidArgument",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
