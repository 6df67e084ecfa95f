use std::path::PathBuf;

/// Errors produced by the data, model and training layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record: expected {expected} bytes, got {actual}")]
    MalformedRecord { expected: usize, actual: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown pipeline `{name}`; valid choices: {valid}")]
    UnknownPipeline { name: String, valid: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (seed {seed})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        seed: u64,
    },

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
