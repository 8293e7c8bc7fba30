use thiserror::Error;

pub type Result<T> = std::result::Result<T, UotError>;

#[derive(Debug, Error)]
pub enum UotError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("point ({x}, {y}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("solver did not converge: {iterations} iterations, relative residual {residual:e}")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("model violation: {0}")]
    ModelViolation(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl UotError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UotError::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        UotError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            UotError::SolverFailure { .. } | UotError::ModelViolation(_) => 3,
            UotError::Io(_) | UotError::Parse(_) => 4,
            _ => 2,
        }
    }

    /// Short stable tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            UotError::InvalidInput(_) => "invalid_input",
            UotError::GridMismatch(_) => "grid_mismatch",
            UotError::OutsideDomain { .. } => "outside_domain",
            UotError::DimensionMismatch { .. } => "dimension_mismatch",
            UotError::SolverFailure { .. } => "solver_failure",
            UotError::ModelViolation(_) => "model_violation",
            UotError::Config { .. } => "config",
            UotError::Parse(_) => "parse",
            UotError::Io(_) => "io",
        }
    }
}
