//! Error type shared by all solver modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite state encountered on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("explicit scheme unstable: dt = {dt:.6e} exceeds admissible dt = {admissible:.6e}")]
    CflViolation { dt: f64, admissible: f64 },

    #[error("Picard iteration diverged; update-norm history: {history:?}")]
    PicardDiverged { history: Vec<f64> },

    #[error("no sign change in bracket [{lo}, {hi}]: r(lo) = {r_lo:.6e}, r(hi) = {r_hi:.6e}")]
    NoSignChange { lo: f64, hi: f64, r_lo: f64, r_hi: f64 },

    #[error("quadrature box too small: kernel mass on box = {mass:.9} < {required:.9}")]
    QuadratureBoxTooSmall { mass: f64, required: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("sufficiency check requires convex domain")]
    NonConvexDomain,
}

pub type Result<T> = std::result::Result<T, CoreError>;
