use thiserror::Error;

pub type Result<T> = std::result::Result<T, AfrError>;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum AfrError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("missing embedding for class `{0}`")]
    Lookup(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl AfrError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AfrError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AfrError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        AfrError::Data(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        AfrError::NumericDomain(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        AfrError::Format {
            offset,
            message: msg.into(),
        }
    }
}
