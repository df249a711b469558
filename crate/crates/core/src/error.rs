use thiserror::Error;

/// Errors produced by corpus ingestion, the numeric kernel, and model I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A record-level problem in a text input, with a 1-based line number.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Shape disagreement in a kernel primitive.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid argument or violated precondition.
    #[error("{0}")]
    Invalid(String),

    /// A contextual vector required by the corpus is absent from the store.
    #[error("missing contextual vector for utterance {utterance} position {position}")]
    MissingContextual { utterance: u32, position: u16 },

    /// Malformed or inconsistent checkpoint data.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
