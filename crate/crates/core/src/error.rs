use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("item id {id} is outside the vocabulary of size {vocab} (flat position {position})")]
    OutOfVocabulary {
        id: usize,
        vocab: usize,
        position: usize,
    },

    #[error("degenerate batch in {op}: every element is masked")]
    DegenerateBatch { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by an earlier backward pass")]
    TapeReused,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("user {user} has {len} interactions, a leave-one-out split needs at least 3")]
    Split { user: u64, len: usize },

    #[error("sampled position {position} lies outside the valid region of row {row}")]
    Sampler { row: usize, position: usize },

    #[error("cannot rank from an empty context")]
    EmptyContext,

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
