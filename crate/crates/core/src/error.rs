use thiserror::Error;

use crate::trajopt::Solution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("mass matrix is numerically singular")]
    LinearSolveFailure,

    #[error("state became non-finite{}", .time.map(|t| format!(" at t = {t:.4} s")).unwrap_or_default())]
    NonFiniteState { time: Option<f64> },

    #[error("target at distance {distance:.4} m lies outside the reachable interval [{min:.4}, {max:.4}] m")]
    Unreachable { distance: f64, min: f64, max: f64 },

    #[error("bearing is undefined for a target with p_x = 0")]
    DegenerateBearing,

    #[error("hand height has no local minimum within {horizon} s of free swing")]
    NoMinimumFound { horizon: f64 },

    #[error("regularized Quu is not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },

    #[error(
        "iLQR could not decrease the cost (best cost {:.6e} after {} iterations)",
        .0.cost(),
        .0.iterations
    )]
    Diverged(Box<Solution>),

    #[error("t = {t} s is outside the reference interval [0, {end}] s")]
    OutOfRange { t: f64, end: f64 },

    #[error("hand ended {distance:.4} m from the bar, beyond the catch tolerance {tolerance} m")]
    NotCaught { distance: f64, tolerance: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}
