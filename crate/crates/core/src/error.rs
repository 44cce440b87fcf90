use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} at position {position} is out of range (limit {limit})")]
    Index {
        what: &'static str,
        position: usize,
        index: usize,
        limit: usize,
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid subnetwork mask: {0}")]
    InvalidMask(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("step {step} is outside the schedule range 1..={total}")]
    StepRange { step: u64, total: u64 },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("mask stream terminated: {0}")]
    StreamTerminated(String),

    #[error("numerical abort at step {step}: {reason}")]
    NumericalAbort { step: u64, reason: String },

    #[error("{0}")]
    Analysis(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
