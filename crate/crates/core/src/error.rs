use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of inputs or evaluator outputs disagree with the model.
    #[error("structural error: {0}")]
    Structural(String),

    /// An evaluator produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Precondition violated by the caller (step guard, grid mismatch, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("blow-up at particle {index}, t = {t}: non-finite state")]
    BlowUp { index: usize, t: f64 },

    #[error("invariant-measure estimate did not converge (final gap {gap:.3e})")]
    NotConverged { gap: f64 },

    #[error("matrix is not positive semidefinite: spectrum {eigenvalues:?}")]
    NotPsd { eigenvalues: Vec<f64> },

    #[error("centering condition violated: value {value:.4e} (standard error {std_error:.2e})")]
    Centering { value: f64, std_error: f64 },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
