use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid medium: {0}")]
    InvalidMedium(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("condition violated: {0}")]
    ConditionViolation(String),

    #[error("commensurability violation: {0}")]
    Commensurability(String),

    #[error("time step too large: {0}")]
    StabilityGuard(String),

    /// The periodic problem `ds b - A(s) b = theta` is solvable only when the
    /// space-time mean of `theta` vanishes; a defect here means the right-hand
    /// side is incompatible (or an effective matrix was assembled wrongly).
    #[error("compatibility defect {defect:.3e} exceeds tolerance {tol:.3e}: right-hand side has nonzero space-time mean")]
    CompatibilityViolation { defect: f64, tol: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("effective matrix not positive definite (min eigenvalue {min_eig:.3e})")]
    PositivityViolation { min_eig: f64 },

    #[error("thinning acceptance rate {rate:.4} below 0.05: rate bound too loose for this medium")]
    InefficientThinning { rate: f64 },

    #[error("malformed field file: {0}")]
    FieldFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
