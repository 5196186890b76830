use thiserror::Error;

/// Errors shared by all model modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "Hilbert dimension {requested} ({points} points, {particles} particles) exceeds the cap {cap}"
    )]
    DimensionCap {
        requested: usize,
        points: usize,
        particles: usize,
        cap: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not {property}: residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    MatrixProperty {
        property: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("kernel matrix is not positive definite (smallest eigenvalue {min_eig:.3e})")]
    KernelNotPositive { min_eig: f64 },

    #[error("kernel matrix condition number {cond:.3e} exceeds the limit {limit:.3e}")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("step-size guard: ‖dρ‖ = {increment:.3e} exceeds {limit:.3e}·‖ρ‖; reduce dt")]
    StepSizeGuard { increment: f64, limit: f64 },

    #[error("time-step guard: dt·‖H‖/ħ = {phase:.3e} exceeds {limit:.3e}; reduce dt")]
    TimeStepGuard { phase: f64, limit: f64 },

    #[error("outcome distribution is degenerate (total probability {total:.3e})")]
    DegenerateDistribution { total: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
