//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: unknown word {0:?}")]
    Vocabulary(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("metric undefined: {0}")]
    DegenerateMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
