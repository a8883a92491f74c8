//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Result`]. Message
//! wording for conditions user code is expected to match on (buffer misuse,
//! degenerate inputs, malformed files) is part of the public contract and
//! asserted by tests.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("degenerate prediction vector")]
    DegeneratePrediction,

    #[error("degenerate batch statistics")]
    DegenerateBatchStats,

    #[error("InfoNCE requires in-batch negatives (batch size {0} < 2)")]
    InfoNceNeedsNegatives(usize),

    #[error("backward requires a scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("sample from empty buffer")]
    EmptyBuffer,

    #[error("buffer dimension mismatch: {0}")]
    BufferDimMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("not an IDX file: {0}")]
    NotIdx(String),

    #[error("malformed data file: {0}")]
    MalformedData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at task {task}, step {step}: {detail}")]
    NonFiniteLoss {
        task: usize,
        step: usize,
        detail: String,
    },

    #[error("not a rehearse checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
