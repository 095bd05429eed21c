use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("non-finite gradient in {param} at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),

    #[error("family rule line {line}: {message}")]
    FamilyRule { line: usize, message: String },

    #[error("search space of {count} sequences exceeds the limit of {limit}")]
    SearchSpaceTooLarge { count: u128, limit: u128 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
