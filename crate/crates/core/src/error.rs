use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    #[error("degenerate baseline: no weighted subject at risk at event time {time}")]
    DegenerateBaseline { time: f64 },

    /// Cholesky failed even after ridge escalation. `minor` is the 0-based
    /// index of the first non-positive leading minor.
    #[error("matrix not positive definite (leading minor {minor}, ridge tried up to {ridge:e})")]
    NotPositiveDefinite { minor: usize, ridge: f64 },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
