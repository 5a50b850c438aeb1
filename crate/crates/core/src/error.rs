use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown encoder recipe `{0}`")]
    UnknownRecipe(String),

    #[error("unknown class {class} (vocabulary has {classes} classes)")]
    UnknownClass { class: usize, classes: usize },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: String, kind: crate::checkpoint::CheckpointErrorKind },

    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}

pub(crate) fn invalid<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(detail.into()))
}
