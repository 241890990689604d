use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("neuron index {index} out of range for adapter with {hidden} neurons")]
    NeuronOutOfRange { index: usize, hidden: usize },

    #[error("degenerate variance after removing neuron {neuron} at output {output}")]
    DegenerateVariance { neuron: usize, output: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model spec hash mismatch: manifest {manifest}, computed {computed}")]
    HashMismatch { manifest: String, computed: String },

    #[error("checkpoint blob truncated: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },

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

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
