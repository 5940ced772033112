use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum HgfError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("sequence length {len} exceeds context length {ctx_len}")]
    Context { len: usize, ctx_len: usize },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in {group} parameter group: {params:?}")]
    NonFiniteGradient { group: &'static str, params: Vec<String> },

    #[error("gradient check failed for {0:?}")]
    Gradcheck(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HgfError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> HgfError {
    HgfError::Dimension {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn config_err(field: impl Into<String>, reason: impl Into<String>) -> HgfError {
    HgfError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}
