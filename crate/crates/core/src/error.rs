use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A raw embedding whose norm is too small to normalize, typically an empty response.
    #[error("embedding has (near-)zero norm {norm:e}")]
    ZeroVector { norm: f64 },

    /// The member embeddings of a cluster cancel out and have no mean direction.
    #[error("member embeddings sum to a (near-)zero vector (norm {norm:e})")]
    ZeroSum { norm: f64 },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding component {index} is not finite")]
    NonFinite { index: usize },

    #[error("no external embedding for response `{0}`")]
    MissingEmbedding(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("step size {step} exceeds 1/(4*smoothness) = {limit}")]
    StepTooLarge { step: f64, limit: f64 },

    #[error("round {round} does not exceed the last recorded round {last}")]
    NonMonotoneRound { round: u32, last: u32 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
