use thiserror::Error;

/// Errors raised by the model, solvers and equilibrium construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("assumption violated at (t={t}, d={d}): {quantity} = {value} outside [{lower}, {upper}]")]
    AssumptionViolation {
        t: f64,
        d: f64,
        quantity: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("exp(-a) overflows at a = {a}; use the truncated driver")]
    Range { a: f64 },

    #[error("step size too large: {reason} (need at least {min_steps} time steps)")]
    StepSize { reason: String, min_steps: usize },

    #[error("field `{field}` left the band [-{bound}, {bound}] at time step {step}")]
    Divergence {
        field: &'static str,
        step: usize,
        bound: f64,
    },

    #[error("no truncation level up to {n_max} keeps the solution inside its band")]
    TruncationFailure { n_max: u32 },

    #[error("point d = {d} lies outside the solved grid [{d_min}, {d_max}]")]
    Extrapolation { d: f64, d_min: f64, d_max: f64 },

    #[error("{excluded} of {total} paths left the spatial grid (limit 1%)")]
    GridCoverage { excluded: usize, total: usize },

    #[error("operation requires constant dividend coefficients")]
    WrongBackend,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("perturbation rejected: {0}")]
    RejectedPerturbation(String),

    #[error("not enough samples: have {have}, need at least {need}")]
    TooFewSamples { have: usize, need: usize },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
