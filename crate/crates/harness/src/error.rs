use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid or unreadable configuration; nothing was run.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or incompatible input files (logs, summaries).
    #[error("input error: {0}")]
    Input(String),
    /// A fold finished but at least one adaptation diverged.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(cdafed::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<cdafed::Error> for HarnessError {
    fn from(e: cdafed::Error) -> Self {
        match e {
            cdafed::Error::Config(m) | cdafed::Error::Schema(m) => HarnessError::Config(m),
            other => HarnessError::Core(other),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
