use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::wire::RemoteError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid run config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] prss_core::Error),

    #[error(transparent)]
    Remote(#[from] RemoteError),

    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("worker pool: {0}")]
    Pool(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
