use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} not below vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate direction: {0}")]
    Degenerate(String),

    #[error("not enough members: need at least {need}, got {got}")]
    TooFewMembers { need: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
