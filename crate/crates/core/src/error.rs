//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants map onto the CLI
//! exit-code contract: config/shape/contract/vocab errors are usage problems,
//! `Numeric` is a runtime numerical failure (NaN/Inf), `Io`/`Json` are
//! filesystem or serialization problems.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch. The message names both offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Text id outside the embedding table.
    #[error("unknown text id {id} (vocab size {vocab})")]
    Vocab { id: usize, vocab: usize },

    /// NaN/Inf or other numerical failure; message carries diagnostics.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
