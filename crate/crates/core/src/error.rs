use thiserror::Error;

/// Errors produced by the geometry, model and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("kernel matrix ill-conditioned at step {step} (condition number {condition:.3e})")]
    IllConditioned { step: usize, condition: f64 },

    #[error("degenerate cell {cell}: zero-measure cell in varifold metric")]
    DegenerateCell { cell: usize },

    #[error("projection onto the momentum-orthogonal hyperplane is undefined for zero momenta")]
    ProjectionUndefined,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
