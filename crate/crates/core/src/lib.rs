//! Streaming dataflow engine with provenance capture, a component registry
//! and seismology pipelines.

pub mod blob;
pub mod cli;
pub mod clock;
pub mod demo;
pub mod datadir;
pub mod enactment;
mod error;
pub mod gateway;
pub mod graph;
pub mod pe;
pub mod provenance;
pub mod registry;
pub mod seismo;
pub mod value;

pub use error::{Error, Result};
