use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes (or axes) incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),
    /// A configuration value violates a structural constraint.
    #[error("config error: {0}")]
    Config(String),
    /// An input violates a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// A computation collapsed to a numerically meaningless state.
    #[error("degenerate error: {0}")]
    Degenerate(String),
    /// An operation produced NaN/Inf from finite inputs.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Malformed file contents (image decode, checkpoint decode, ...).
    #[error("decode error in {path}: {reason}")]
    Decode { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
    pub fn decode(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
