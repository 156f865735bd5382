use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("inverse transform left an imaginary residue of {residue:e} (limit {limit:e}); spectrum is not Hermitian")]
    SymmetryViolation { residue: f64, limit: f64 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("low-frequency threshold {0} outside (0, 0.5)")]
    InvalidThreshold(f64),

    #[error("invalid aggregation request: {0}")]
    InvalidRequest(String),

    #[error("epoch {epoch} exceeds the schedule horizon {total}")]
    InvalidEpoch { epoch: usize, total: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid data scale: {0}")]
    InvalidScale(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 IO, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidThreshold(_) | Error::InvalidEpoch { .. } => 2,
            Error::InvalidDataset(_)
            | Error::InvalidScale(_)
            | Error::InvalidCheckpoint(_)
            | Error::CorruptCheckpoint(_)
            | Error::UnsupportedVersion { .. } => 3,
            Error::Io { .. } => 4,
            _ => 1,
        }
    }
}
