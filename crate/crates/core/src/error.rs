use std::path::PathBuf;

use crate::image::Mask;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("region exceeded {limit} pixels (grew to {grown})")]
    RegionOverflow { limit: usize, grown: usize, partial: Mask },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("missing inputs: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, used by the CLI's one-line error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Stratification(_) => "stratification",
            Error::RegionOverflow { .. } => "overflow",
            Error::EmptyInput(_) => "empty-input",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Leakage(_) => "leakage",
            Error::MissingInput(_) => "missing-input",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into().display().to_string(),
            reason: reason.into(),
        }
    }
}
