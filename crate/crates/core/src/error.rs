use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("duplicate lexicon entries: {}", .0.join(", "))]
    DuplicateEntries(Vec<String>),

    #[error("template `{0}` has no {{profession}} placeholder")]
    MissingPlaceholder(String),

    #[error("template `{0}`: {1}")]
    BadTemplate(String, String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("prompt has {len} tokens but the context holds {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("word `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("term `{0}` cannot be resolved to a single token")]
    UnresolvableTerm(String),

    #[error("unknown profession `{0}`")]
    UnknownProfession(String),

    #[error("scoring failed on sample {id}: {source}")]
    Sample {
        id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("scorer `{0}` does not expose hidden states; locating needs an in-process model")]
    NoTraces(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("remote protocol error: {0}")]
    Protocol(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_sample(id: u64, source: Error) -> Self {
        Error::Sample {
            id,
            source: Box::new(source),
        }
    }
}
