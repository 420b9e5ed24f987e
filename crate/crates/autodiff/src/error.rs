use thiserror::Error;

/// Errors raised while recording or differentiating a computation.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: String, shapes: Vec<Vec<usize>> },

    #[error("{op}: {message}")]
    InvalidArgument { op: String, message: String },

    #[error("{op}: produced a non-finite value from finite inputs")]
    NonFinite { op: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("draw {index} failed: {source}")]
    Draw {
        index: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err(op: &str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.to_string(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

pub(crate) fn invalid(op: &str, message: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op: op.to_string(),
        message: message.into(),
    }
}
