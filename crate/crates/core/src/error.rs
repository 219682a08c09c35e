use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension {dim} exceeds the configured capacity {max}")]
    Capacity { dim: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("operator is not hermitian (relative deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("logarithm of a singular operator (smallest eigenvalue {0:.3e})")]
    Singular(f64),

    #[error("invalid symmetry: {0}")]
    InvalidSymmetry(String),

    #[error("block decomposition failed after {attempts} attempts: {reason}")]
    Decomposition { attempts: usize, reason: String },

    #[error("term on offsets {offsets:?} is not gauge invariant (residual {residual:.3e})")]
    GaugeViolation { offsets: Vec<usize>, residual: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("support error: {0}")]
    Support(String),

    #[error("operators do not commute (defect {0:.3e})")]
    NonCommuting(f64),

    #[error("hypothesis not met: {0}")]
    Hypothesis(String),

    #[error("search budget exhausted after {0} nodes")]
    Budget(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
