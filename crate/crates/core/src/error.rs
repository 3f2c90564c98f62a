use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sketched covariance is singular (M={m}, d={d}, spectrum {spectrum}): smallest eigenvalue {smallest:e} vs largest {largest:e}")]
    Singular {
        m: usize,
        d: usize,
        spectrum: String,
        smallest: f64,
        largest: f64,
    },

    #[error("sketched covariance has a negative eigenvalue {0:e} beyond round-off")]
    NotPositiveSemidefinite(f64),

    #[error("insufficient tail rank: need at least {needed} columns after index {k}, have {available}")]
    InsufficientTailRank {
        k: usize,
        needed: usize,
        available: usize,
    },

    #[error("non-positive excess risk at point {index} (x={x}, risk={risk}, sigma2={sigma2})")]
    NonPositiveExcess {
        index: usize,
        x: f64,
        risk: f64,
        sigma2: f64,
    },

    #[error("fit did not converge from any start; best loss {loss:e} at {params:?}")]
    FitNotConverged { params: Vec<f64>, loss: f64 },

    #[error("no usable records in cell (M={m}, N={n}); {excluded} diverged")]
    EmptyCell { m: usize, n: usize, excluded: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Errors caused by user input rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_) | Error::Config(_) | Error::DimensionMismatch { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
