use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: column \"{column}\": {reason}")]
    Schema { column: String, reason: String },

    #[error("parse error at row {row}, column \"{column}\": cannot parse {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("encoding error in column \"{column}\": unrecognized token {token:?}")]
    Encoding { column: String, token: String },

    #[error("imputation error: column \"{column}\" has no observed values")]
    Imputation { column: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("no convergence after {iterations} iterations: {detail}")]
    Convergence { iterations: usize, detail: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("unsupported sample size {n}: {reason}")]
    UnsupportedSize { n: usize, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::Fit(_)
            | Error::Convergence { .. }
            | Error::Degenerate(_)
            | Error::UnsupportedSize { .. } => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
