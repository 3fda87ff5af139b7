use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("unknown character {0:?} (vocabulary is closed)")]
    UnknownChar(char),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("text of {len} characters does not fit max_text_len {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("backend {0} is not available for this model")]
    UnsupportedBackend(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
