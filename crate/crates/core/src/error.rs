use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by how a caller should react: configuration problems,
/// malformed or damaged data, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty_input",
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt",
            Error::Numeric(_) => "numeric",
            Error::Divergence(_) => "divergence",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
