use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the linear solver layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: matrix is {rows}x{cols}, right-hand side has length {rhs}")]
    Dimension {
        rows: usize,
        cols: usize,
        rhs: usize,
    },
    #[error("matrix is singular or factorization broke down: {0}")]
    Singular(String),
    #[error("residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Residual { residual: f64, tolerance: f64 },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("internal consistency failure: {0}")]
    Consistency(String),
    #[error("volume projection failed: {0}")]
    Projection(String),
    #[error("stationary topological derivative (identically zero)")]
    ZeroDerivative,
    #[error("config error at line {line}: key `{key}`: {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed field file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
