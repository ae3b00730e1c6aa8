use alloc::string::String;

/// Errors raised by the simulator core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two values that must share a layer layout do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A quantiser range collapsed to a single point.
    #[error("degenerate range [{lo}, {hi}]")]
    DegenerateRange { lo: f32, hi: f32 },

    /// A received payload is truncated or carries out-of-alphabet symbols.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    /// Dirichlet partitioning kept producing empty clients.
    #[error("partition infeasible after {retries} retries")]
    PartitionInfeasible { retries: usize },

    /// Training produced NaN or infinite parameters.
    #[error("non-finite parameters after training step")]
    NonFinite,

    /// Server and client codebooks diverged between refreshes.
    #[error("codebook mismatch on layer {layer}")]
    CodebookMismatch { layer: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}
