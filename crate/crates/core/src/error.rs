use thiserror::Error;

/// Errors raised by the MFGC laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("size mismatch: {left} vs {right} particles")]
    SizeMismatch { left: usize, right: usize },

    #[error("ensemble must contain at least one particle")]
    EmptyEnsemble,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("density grids differ")]
    GridMismatch,

    #[error("density {value:e} at x = {x} (index {index}) is below the floor {floor:e}")]
    DensityFloor {
        index: usize,
        x: f64,
        value: f64,
        floor: f64,
    },

    #[error("assignment problem of size {n} exceeds the cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("minimizer failed to converge after {iterations} iterations (|grad| = {gradient:e})")]
    MinimizerDiverged { iterations: usize, gradient: f64 },

    #[error("fixed point of the control law did not converge after {iterations} iterations (last gap {residual:e})")]
    FixedPointDiverged { iterations: usize, residual: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("negative density {value:e} at time step {step} (CFL violation?)")]
    NegativeDensity { step: usize, value: f64 },

    #[error("mass drift {drift:e} at time step {step} exceeds 1e-10")]
    MassDrift { step: usize, drift: f64 },

    #[error("non-finite value function at time step {step}; domain too small or scheme unstable")]
    BlowUp { step: usize },

    #[error("regression is rank deficient at time step {step} (condition number {condition:e})")]
    RankDeficient { step: usize, condition: f64 },

    #[error("the grid solver supports beta = 0 only (got {0})")]
    CommonNoiseUnsupported(f64),

    #[error("finite-difference step underflow: {0}")]
    StepUnderflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
