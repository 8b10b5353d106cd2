use abbrex_numerics::NumericsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("sequence of {len} positions exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no records found")]
    NoRecords,
    #[error("split {0} is empty after filtering")]
    EmptySplit(&'static str),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("frozen base model changed during prompt tuning ({before} -> {after})")]
    FrozenBaseViolated { before: String, after: String },
}
