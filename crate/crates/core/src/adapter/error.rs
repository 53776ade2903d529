use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensor dimension `{0}` must be at least 1")]
    EmptyDimension(&'static str),
    #[error("tensor contains a non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("malformed fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;
