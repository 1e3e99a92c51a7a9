use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("masks are not nested: {0}")]
    NotNested(String),

    #[error("dirichlet partition left a client without samples after {0} attempts")]
    PartitionRetriesExhausted(usize),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value in round {round}{}: {what}", client.map(|c| format!(", client {c}")).unwrap_or_default())]
    NonFinite {
        round: usize,
        client: Option<usize>,
        what: String,
    },

    #[error("local training diverged at step {step}")]
    Diverged { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            Error::Io(_) | Error::Csv(_) => 4,
            _ => 2,
        }
    }
}
