use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them to
/// stable exit-code categories (config = 2, data = 3, runtime = 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Codec { path: PathBuf, msg: String },

    #[error("checkpoint rejected: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged at step {step}: {msg} (last good checkpoint: {})",
            last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    TrainingDiverged {
        step: u64,
        msg: String,
        last_good: Option<PathBuf>,
    },
}

impl Error {
    /// Exit-code category for the CLI: 2 for configuration problems,
    /// 3 for data/input problems, 4 for runtime failures.
    pub fn exit_category(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch(_) => 2,
            Error::InvalidInput(_)
            | Error::DegenerateInput(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Codec { .. } => 3,
            Error::TrainingDiverged { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
