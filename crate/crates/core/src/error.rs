use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node}: {message}")]
    Shape { node: String, message: String },

    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("input `{0}` is not bound")]
    Unbound(String),

    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for `{tensor}` at iteration {iteration} (loss {loss})")]
    NonFinite {
        tensor: String,
        iteration: u64,
        loss: f64,
    },

    #[error("unknown model `{name}`; the zoo contains: {zoo}")]
    UnknownModel { name: String, zoo: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("iteration {iteration} is outside the schedule of {total} iterations")]
    IterationOutOfRange { iteration: u64, total: u64 },

    #[error("snapshot for iteration {0} already stored")]
    DuplicateSnapshot(u64),

    #[error("no snapshot stored for iteration {iteration}; available: {available:?}")]
    MissingSnapshot { iteration: u64, available: Vec<u64> },

    #[error("compression ratio is undefined when every kernel weight is pruned")]
    FullyPruned,

    #[error("{path}: malformed file at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
