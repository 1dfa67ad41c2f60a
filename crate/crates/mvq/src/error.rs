use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Rejection sampling could not place non-overlapping blocks; the bin is
    /// too small for the requested block count/size.
    #[error("failed to place {blocks} non-overlapping blocks after {attempts} attempts")]
    Placement { blocks: usize, attempts: usize },

    /// Tensor shape does not match what a layer expects.
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    /// Non-finite values appeared in gradients, losses, or Bellman targets.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A caller broke an API contract (empty view mask, mask on a
    /// non-dropout architecture, stale activation cache, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// CEM could not find any finite Q-value among its samples.
    #[error("action optimizer failed: {0}")]
    Optimizer(String),

    /// Bad experiment configuration or CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint or episode log file.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
