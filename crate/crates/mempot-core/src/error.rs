use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum MempotError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A direction was required but the vector has (near-)zero norm.
    #[error("degenerate vector: norm {norm:.3e}")]
    DegenerateVector { norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("session already closed after round {round} ({state})")]
    SessionClosed { round: u32, state: String },

    #[error("optimization diverged at step {step}: {reason}")]
    OptimizationDiverged { step: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("decoding stalled: {0}")]
    DecodingStalled(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Config validation failure with a JSON-pointer-style location.
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    /// A pipeline stage failed; wraps the cause with the stage name.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MempotError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MempotError>;

impl MempotError {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        MempotError::InvalidArgument(msg.into())
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        MempotError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
