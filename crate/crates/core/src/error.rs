use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("no admissible component")]
    NoAdmissibleComponent,

    #[error("no admissible expert for token {token}")]
    NoAdmissibleExpert { token: usize },

    #[error("no tokens to aggregate")]
    NoTokensToAggregate,

    #[error("empty sequence")]
    EmptySequence,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    ConfigLine { path: PathBuf, line: u64, msg: String },

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("label {label:?} in {path} does not appear in the training split")]
    UnseenLabel { path: PathBuf, label: String },

    #[error("instance too large for enumeration: {size} non-sensitive tokens (limit {limit})")]
    InstanceTooLarge { size: usize, limit: usize },

    #[error("training diverged at {stage} {index}: loss is not finite")]
    Diverged { stage: &'static str, index: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

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

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
