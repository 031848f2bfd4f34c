use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: dimension must be even, got {dim}")]
    OddDimension { op: &'static str, dim: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward on a tensor that is not attached to a live tape")]
    DetachedBackward,

    #[error("operands were recorded on different tapes")]
    TapeMismatch,

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("decode cache has {cached} positions but step expects position {expected}")]
    CachePositionGap { cached: usize, expected: usize },

    #[error("routing: {0}")]
    Routing(String),

    #[error("quantization: {0}")]
    Quant(String),

    #[error("qgemm: scale groups misaligned with the 128-wide inner chunks ({0})")]
    MisalignedGroups(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("dispatch: {0}")]
    Dispatch(String),

    #[error("group size must be at least 2 for standardization, got {0}")]
    GroupTooSmall(usize),

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
