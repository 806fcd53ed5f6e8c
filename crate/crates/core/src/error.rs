use thiserror::Error;

/// Errors raised anywhere in the runtime.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("bad stream format: {0}")]
    Format(String),
    #[error("event {index} out of bounds: ({x}, {y}) outside {width}x{height}")]
    EventBounds {
        index: usize,
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Vocab { id: u32, vocab: usize },
    #[error("session error: {0}")]
    Session(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("gradient check failed for {component}: max relative error {error:.3e} exceeds {tolerance:.1e}")]
    GradCheck {
        component: String,
        error: f64,
        tolerance: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
