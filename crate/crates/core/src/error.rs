use std::path::PathBuf;

/// Errors produced by the simulator and its building blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss in batch {batch}")]
    Numerical { batch: usize },

    #[error("degenerate sample: variance {variance:e} is too small to fit a beta distribution")]
    DegenerateSample { variance: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("{}line {line}: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
