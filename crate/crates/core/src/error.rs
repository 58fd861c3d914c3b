use thiserror::Error;

use crate::control::OptimizationTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("implicit step matrix I - dt*A is singular at step {step}")]
    SingularStep { step: usize },

    #[error("state blew up on path {path} at step {step} (|X|_H = {norm:e})")]
    BlowUp { path: usize, step: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("rank-deficient regression at step {step} (condition number {condition:e})")]
    RankDeficient { step: usize, condition: f64 },

    #[error(
        "Picard iteration did not converge in {max_iter} iterations at rho = {rho} \
         (last distance {distance:e}, contraction factor {factor})"
    )]
    PicardDiverged {
        rho: f64,
        max_iter: usize,
        distance: f64,
        factor: f64,
    },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("optimizer failed: {reason}")]
    Optimizer {
        reason: String,
        trace: Box<OptimizationTrace>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
