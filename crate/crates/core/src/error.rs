use std::io;

/// Errors produced anywhere in the defense pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter or shape does not satisfy its documented range.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked in a state it does not support.
    #[error("state error: {0}")]
    State(String),
    /// A caller-side precondition was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A weight or tensor container could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// A stored layer's shape table disagrees with the model layout.
    #[error("format error: layer {layer} ({kind}): {detail}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    /// Dataset files are malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),
    /// Training or patch optimization produced NaN or infinity.
    #[error("non-finite loss ({context})")]
    NonFiniteLoss { context: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
