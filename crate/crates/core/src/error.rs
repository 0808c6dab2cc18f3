use std::path::PathBuf;

/// Errors produced anywhere in the place-recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("config error: {key}: {message}")]
    Config { key: String, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("undefined overlap: both voxel sets are empty")]
    UndefinedOverlap,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Config { .. } => "config",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::Dataset(_) => "dataset",
            Error::UndefinedOverlap => "undefined-overlap",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Usage(_) => "usage",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
