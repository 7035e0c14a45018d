use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing entry `{0}`")]
    MissingEntry(String),

    #[error("entry `{name}` has shape {found:?}, expected {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty background region at stage {stage}: no style source")]
    EmptyBackground { stage: usize },

    #[error("non-finite loss at step {step}: first offending term is `{term}`")]
    NonFinite { step: usize, term: String },

    #[error("comparison graph is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<String>>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input (files, flags, configs) rather than a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. })
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
