use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("zero valid records")]
    ZeroRecords,

    #[error("all users filtered out")]
    AllUsersFiltered,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row-count mismatch: expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty history")]
    EmptyHistory,

    #[error("group {0} is empty")]
    EmptyGroup(usize),

    #[error("no gradient atoms: every group is absent from the batch")]
    NoAtoms,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
