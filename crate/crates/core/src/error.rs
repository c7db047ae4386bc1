use thiserror::Error;

/// Errors raised anywhere in the re-identification stack.
#[derive(Debug, Error)]
pub enum ReidError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {component} loss at batch {batch}")]
    NonFinite { component: String, batch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReidError>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> ReidError {
    ReidError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> ReidError {
    ReidError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> ReidError {
    ReidError::Config(msg.into())
}
