use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error classes surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("image/label pairing: {0}")]
    Pairing(String),
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("invalid blob spec: {0}")]
    Spec(String),
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("hierarchy/data mismatch: {0}")]
    Consistency(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
