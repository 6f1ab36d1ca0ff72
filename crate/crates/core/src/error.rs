use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("{op}: value {value} outside the domain of the operation")]
    Domain { op: &'static str, value: f64 },

    #[error("row {row} has norm {norm:e}, cannot be normalized")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("input too short: {got} samples, need at least {needed} ({what})")]
    TooShort {
        got: usize,
        needed: usize,
        what: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("utterance ids missing from manifest: {0:?}")]
    MissingUtterances(Vec<String>),

    #[error("metric requires both target and non-target scores")]
    SingleClass,

    #[error("non-finite loss (replay with batch seed {seed})")]
    NonFiniteLoss { seed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::DegenerateEmbedding { .. }
        )
    }
}
