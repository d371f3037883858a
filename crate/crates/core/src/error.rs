use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unsupported operator: {0}")]
    Unsupported(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(
        "training diverged at epoch {epoch}, batch {batch} (loss {loss}); active noises: [{}]",
        active.join(", ")
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        active: Vec<String>,
    },

    #[error(
        "scaling calibration failed: no factor on the grid passes; worst cell {family}/severity {severity} scored {score}"
    )]
    Calibration {
        family: String,
        severity: usize,
        score: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("study failed: {0}")]
    Study(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("refusing to overwrite existing artifact directory {0} (pass --force)")]
    AlreadyExists(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_)
                | Error::Validation(_)
                | Error::Schema(_)
                | Error::Config { .. }
                | Error::Usage(_)
                | Error::Unsupported(_)
                | Error::AlreadyExists(_)
        )
    }
}
