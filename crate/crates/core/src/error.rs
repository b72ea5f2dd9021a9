use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// An input value is outside the operation's domain (non-finite scalar,
    /// empty row, zero direction vector, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An internal contract between modules was violated (out-of-range code,
    /// scheme mismatch, dimension disagreement).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor / layer shapes do not compose.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Operation invoked in a state it does not support (e.g. integer
    /// inference on a model that was never quantized).
    #[error("invalid state: {0}")]
    State(String),

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    /// Not enough data points for a fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Calibration anchors do not identify the model parameters.
    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(String),

    /// Requested configuration is outside the supported envelope.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}
