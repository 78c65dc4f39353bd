use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left} and {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("infeasible alignment: {0}")]
    Infeasible(String),

    #[error("no head for task {0}")]
    MissingHead(u32),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
