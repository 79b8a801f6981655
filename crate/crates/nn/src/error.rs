use std::io;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
