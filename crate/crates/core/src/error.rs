use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("graph is not acyclic: node {node} consumes node {input}")]
    Cycle { node: usize, input: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("latent space has {count} configurations, enumeration cap is {cap}")]
    EnumerationCap { count: u128, cap: usize },

    #[error("relative ratio undefined: exact gradient has zero norm")]
    ZeroExactGradient,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step} ({config})")]
    Diverged { step: usize, config: String },

    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX payload ({found} of {expected} bytes)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset `{0}` not found")]
    MissingDataset(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
