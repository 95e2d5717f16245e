use thiserror::Error;

/// Errors shared across the tensor, decomposition and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode {mode} out of range for tensor of order {ndim}")]
    ModeOutOfRange { mode: usize, ndim: usize },

    #[error("zero-norm column: layer {layer:?}, mode {mode}, rank index {rank}")]
    ZeroColumn {
        layer: Option<String>,
        mode: usize,
        rank: usize,
    },

    #[error("decomposition target is entirely zero")]
    ZeroTarget,

    #[error("non-finite value in {context} of layer {layer}")]
    NonFinite { layer: String, context: &'static str },

    #[error("layer {layer} is incompatible: {reason}")]
    LayerMismatch { layer: String, reason: String },

    #[error("model has no CP-parameterized layers to compress")]
    NothingToCompress,

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
