use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("record {record}: turn {turn}: {message}")]
    Parse { record: String, turn: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("transport failure for {item}: {message}")]
    Transport { item: String, message: String },

    #[error("generation produced no tokens")]
    EmptyGeneration,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config { .. }
                | Error::Precondition(_)
                | Error::Shape(_)
        )
    }
}
