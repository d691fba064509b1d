use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MipError>;

#[derive(Debug, Error)]
pub enum MipError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {file} at row {row}, column {column}: {message}")]
    Parse {
        file: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl MipError {
    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        MipError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MipError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MipError::Config(_) | MipError::Contract(_) | MipError::Domain(_) => 2,
            MipError::Shape { .. } => 2,
            MipError::Data(_) | MipError::Parse { .. } | MipError::Io { .. } | MipError::Serde(_) => 3,
            MipError::Numerical(_) => 4,
        }
    }
}

impl From<serde_json::Error> for MipError {
    fn from(e: serde_json::Error) -> Self {
        MipError::Serde(e.to_string())
    }
}
