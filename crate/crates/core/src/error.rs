use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    NodeShape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("input `{0}` is not bound")]
    MissingInput(String),

    #[error("parameter `{0}` is not bound")]
    MissingParam(String),

    #[error("backward seed node {0} is not a scalar")]
    SeedNotScalar(usize),

    #[error("backward called without a matching forward evaluation")]
    NotEvaluated,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite function value near the probe point")]
    NonFiniteProbe,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model construction: {0}")]
    Model(String),

    #[error("non-finite output in coupling layer {layer}")]
    LayerNonFinite { layer: usize },

    #[error("IDX magic {0:#010x} is not an image or label file")]
    IdxMagic(u32),

    #[error("IDX payload truncated: expected {expected} bytes, found {found}")]
    IdxTruncated { expected: usize, found: usize },

    #[error("IDX dimensions overflow")]
    IdxDimOverflow,

    #[error("pixel value {0} outside 0..=255")]
    PixelRange(i64),

    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),

    #[error("synthetic dataset file: {0}")]
    SynthFormat(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("training diverged at generator step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("singular value decomposition did not converge at probe {probe}")]
    SvdNoConvergence { probe: usize },

    #[error("jacobian column {column} at probe {probe} disagrees with finite differences (rel err {err:.3e})")]
    JacobianCheck { probe: usize, column: usize, err: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
