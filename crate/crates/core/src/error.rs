use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("empty key set")]
    EmptyKeySet,

    #[error("position out of pretrained range: {position} >= {max_position}")]
    PositionOutOfRange { position: usize, max_position: usize },

    #[error("scope exceeds pretrain window: {scope_len} > {window}")]
    ScopeExceedsWindow { scope_len: usize, window: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input")]
    EmptyInput,

    #[error("token {token} out of vocabulary (size {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds pretrain window {window}")]
    SequenceTooLong { len: usize, window: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
