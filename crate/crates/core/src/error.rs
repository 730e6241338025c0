use thiserror::Error;

/// Errors raised by model construction, root finding, integration and parsing.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown parameter `{name}` for model `{model}`")]
    UnknownParameter { model: String, name: String },

    #[error("unknown species `{0}`")]
    UnknownSpecies(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("bulk must be non-empty for reduction operations")]
    EmptyBulk,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("QSS Newton did not converge after {iterations} iterations (residual {residual:e})")]
    QssNonConvergence { iterations: usize, residual: f64 },

    #[error("singular bulk Jacobian at candidate QSS root")]
    SingularJacobian,

    #[error(
        "bulk has a second QSS root ({first:?} vs {second:?}); unique-QSS assumption violated"
    )]
    MultipleQssRoots { first: Vec<f64>, second: Vec<f64> },

    #[error("integrator failed at t = {t}: {reason}")]
    IntegratorFailure { t: f64, reason: String },

    #[error("ZMn step too coarse: step-halving difference {difference:e} exceeds {tolerance:e}")]
    StepTooCoarse { difference: f64, tolerance: f64 },

    #[error("state is not a fixed point (residual {0:e})")]
    NotFixedPoint(f64),

    #[error("no fixed points found: {0}")]
    NoFixedPoints(String),

    #[error("{line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
