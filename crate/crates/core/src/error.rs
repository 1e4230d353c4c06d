use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("series did not converge within {terms} terms")]
    NonConvergent { terms: usize },

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("degenerate kernel at q={q:e} m, rho={rho:e} m: {reason}")]
    KernelDegenerate { q: f64, rho: f64, reason: String },

    #[error("kernel table resolution insufficient: {0}")]
    TableResolution(String),

    #[error("oscillation unresolved: {0}")]
    OscillationResolution(String),

    #[error("normalization calibration failed: {0}")]
    CalibrationFailure(String),

    #[error("integrators disagree: quadrature {quadrature:e} vs monte carlo {monte_carlo:e} (tolerance {tolerance:e})")]
    IntegratorDisagreement {
        quadrature: f64,
        monte_carlo: f64,
        tolerance: f64,
    },

    #[error("config error (line {line}, `{field}`): {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },

    #[error("all plotted values are equal; nothing to scale")]
    DegenerateRange,

    #[error("invalid axis: {0}")]
    InvalidAxis(String),

    #[error("malformed table at line {line}: {message}")]
    Table { line: usize, message: String },

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
