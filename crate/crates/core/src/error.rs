use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown system `{0}` (expected one of: rossler, lorenz, linear_decay)")]
    UnknownSystem(String),

    #[error("system `{system}` has no parameter named `{name}`")]
    UnknownParameter { system: String, name: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in RK4 stage {stage}")]
    NonFiniteStage { stage: &'static str },

    #[error("trajectory diverged at step {step} (|coord| > {bound:e})")]
    Divergence { step: usize, bound: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("role rule violated: {0}")]
    RoleViolation(String),

    #[error("unknown symbol `{0}`")]
    UnknownSymbol(char),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteStage { .. } | Error::Divergence { .. } | Error::Calibration(_)
        )
    }
}
