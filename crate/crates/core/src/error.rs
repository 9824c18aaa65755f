use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema mismatch in columns: {}", .0.join(", "))]
    SchemaMismatch(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infinite privacy loss: noise multiplier is zero with sampling rate {q}")]
    InfinitePrivacyLoss { q: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round} failed: {reason}")]
    RoundFailure { round: u32, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::SchemaMismatch(_)
            | Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Aggregation(_)
            | Error::Io(_) => 3,
            Error::Decode(_) | Error::Protocol(_) | Error::RoundFailure { .. } => 4,
            Error::Calibration(_) | Error::InfinitePrivacyLoss { .. } => 5,
        }
    }
}
