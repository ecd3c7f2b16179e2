use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid sequence {index}: {message}")]
    InvalidSequence { index: usize, message: String },

    #[error("sequence of length {len} is too short for horizon {horizon}")]
    InsufficientLength { len: usize, horizon: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampler diverged at diffusion step {t}")]
    SamplerDivergence { t: usize },

    #[error("interval forecast stalled after {rounds} rounds without progress")]
    Stalled { rounds: usize },

    #[error("hawkes simulation diverged: intensity {intensity} after {events} events")]
    HawkesDivergence { intensity: f64, events: usize },

    #[error("training aborted at epoch {epoch}, batch {batch}, t={t}: {message}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        t: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown strategy '{name}' (available: {available})")]
    UnknownStrategy { name: String, available: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
