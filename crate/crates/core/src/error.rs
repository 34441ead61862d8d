use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid model spec: {0}")]
    InvalidModel(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("payload for {method} is missing {component}")]
    MissingPayload {
        method: &'static str,
        component: &'static str,
    },

    #[error("requested {requested} clients but the roster only has {available}")]
    RosterTooSmall { requested: usize, available: usize },

    #[error("round {round}: no client returned an update")]
    NoUpdates { round: usize },

    #[error("round {round} is beyond the recorded history of {len} rounds")]
    RoundOutOfRange { round: usize, len: usize },

    #[error("mixed config digests: {0} vs {1}")]
    MixedDigest(String, String),

    #[error("run {method}/seed {seed} failed at round {round}: {source}")]
    Run {
        method: String,
        seed: u64,
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
