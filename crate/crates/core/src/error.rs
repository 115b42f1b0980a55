use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum KpError {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("non-finite coordinate or feature value")]
    NonFinite,

    #[error("{what} must be positive, got {value}")]
    NotPositive { what: &'static str, value: f64 },

    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("coincident points make the repulsive energy infinite")]
    CoincidentPoints,

    #[error("first batch element has {points} points, exceeding the budget of {budget}")]
    OversizedElement { points: usize, budget: usize },

    #[error("element {index} is empty")]
    EmptyElement { index: usize },

    #[error("offset predictor output width {got} does not match 3*K = {expected}")]
    OffsetWidth { expected: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}; diagnostics dumped to {dump}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        dump: String,
    },

    #[error("{left} points still unvisited after {passes} extra inference passes")]
    Coverage { left: usize, passes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("corrupt or incompatible file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KpError>;
