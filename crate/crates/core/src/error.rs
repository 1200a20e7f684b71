use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("vocabulary error{}: {message}", class_id.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Vocabulary {
        class_id: Option<String>,
        message: String,
    },

    #[error("unknown class id {class_id:?} for {task} vocabulary")]
    UnknownClass { class_id: String, task: String },

    #[error("{path}:{line}: {message}")]
    Annotation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("positive mask violation: {0}")]
    Mask(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("freeze policy error: {0}")]
    Freeze(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn vocab(class_id: Option<&str>, message: impl Into<String>) -> Self {
        Error::Vocabulary {
            class_id: class_id.map(str::to_string),
            message: message.into(),
        }
    }
}
