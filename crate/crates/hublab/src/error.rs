//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HubError {
    /// Tensor dimension disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Out-of-range token id, layer, or position.
    #[error("index out of range: {0}")]
    Index(String),

    /// API misuse (bad argument combinations, empty inputs, double backward).
    #[error("usage: {0}")]
    Usage(String),

    /// Malformed file content (checkpoints, corpora, CSVs, configs).
    #[error("format: {0}")]
    Format(String),

    /// Missing lexeme surface or unknown token string.
    #[error("lexicon: {0}")]
    Lexicon(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error("io `{context}`: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl HubError {
    pub fn shape(msg: impl Into<String>) -> Self {
        HubError::Shape(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        HubError::Index(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        HubError::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        HubError::Format(msg.into())
    }
    pub fn lexicon(msg: impl Into<String>) -> Self {
        HubError::Lexicon(msg.into())
    }
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HubError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HubError>;
