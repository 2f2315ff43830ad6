use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where a non-finite value first showed up in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Embedding,
    Encoder(usize),
    Decoder(usize),
    Output,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Embedding => f.write_str("embedding"),
            Stage::Encoder(i) => write!(f, "encoder layer {i}"),
            Stage::Decoder(i) => write!(f, "decoder layer {i}"),
            Stage::Output => f.write_str("output projection"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },

    #[error("non-finite value in {stage}")]
    NonFinite { stage: Stage },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {source}")]
    TrainingDiverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("token id {id} is outside a vocabulary of {vocab_size}")]
    UnknownId { id: u32, vocab_size: usize },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("no embedding for token id {0}")]
    MissingEmbedding(u32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no reference summary for `{0}`")]
    MissingReference(String),
}

impl Error {
    pub fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidConfig { field, message: message.into() }
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
