use thiserror::Error;

/// Errors raised by the testbed library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// The MoCo queue still needs target representations before a loss exists.
    #[error("moco queue warming up ({filled}/{capacity})")]
    WarmUp { filled: usize, capacity: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
