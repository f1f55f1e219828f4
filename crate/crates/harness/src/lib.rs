//! Experiment orchestration for the guidance policies in `prss-core`:
//! configuration, threshold sweeps, run manifests, SVG reports, the remote
//! denoiser protocol and the paraphrase client.

pub mod config;
mod error;
pub mod io;
pub mod llm;
pub mod report;
pub mod sweep;
pub mod wire;

pub use error::HarnessError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
