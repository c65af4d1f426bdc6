use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (graph node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("degenerate manifold: {0}")]
    Degenerate(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("non-finite objective term for sample {sample}")]
    NonFiniteSample { sample: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: u64, last_good: Box<crate::train::Checkpoint> },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attaches a layer index to errors raised inside a layer.
    /// Failures caused by the numbers rather than the inputs' shape or
    /// configuration: non-finite values (also when reported by a layer) and
    /// singular matrices.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteSample { .. } | Error::Degenerate(_) => true,
            Error::Layer { msg, .. } => msg.starts_with("non-finite"),
            _ => false,
        }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Self {
        match self {
            Error::Layer { .. } => self,
            Error::NonFinite { op, node } => Error::Layer { layer, msg: format!("non-finite value from `{op}` (node {node})") },
            other => Error::Layer { layer, msg: other.to_string() },
        }
    }
}
