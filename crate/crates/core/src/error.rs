use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants group into the three failure classes the CLI maps onto exit
/// codes: contract/usage problems, data or format problems, and numeric
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("unsupported snapshot version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    FileSize {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("calibration failed: {detail} (last bracket [{lo}, {hi}])")]
    Calibration { detail: String, lo: f64, hi: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad class of an [`Error`], used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Contract(_) | Error::Parameter { .. } => ErrorClass::Usage,
            Error::Dimension { .. } | Error::NonFinite(_) | Error::Calibration { .. } => {
                ErrorClass::Numeric
            }
            Error::Format { .. }
            | Error::Version { .. }
            | Error::FileSize { .. }
            | Error::Manifest(_)
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
        }
    }
}
