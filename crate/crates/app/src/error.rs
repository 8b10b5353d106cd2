use abbrex_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("unknown or expired request {0:?}")]
    UnknownRequest(String),
    #[error("malformed abbreviation: {0}")]
    MalformedAbbreviation(String),
    #[error("invalid user id {0:?}: use 1-64 characters from [A-Za-z0-9_-]")]
    InvalidUserId(String),
    #[error("soft prompt was tuned against base {prompt}, but the served base is {served}")]
    BaseMismatch { served: String, prompt: String },
    #[error("soft prompt width {found} does not match the base model width {expected}")]
    PromptShape { expected: usize, found: usize },
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("{0}")]
    Invalid(String),
}

impl AppError {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Core(e) => match e {
                CoreError::Io(_) => "io",
                CoreError::Json(_) | CoreError::Parse { .. } | CoreError::NoRecords => "parse",
                CoreError::Corrupt(_) => "corrupt",
                CoreError::VersionMismatch { .. } => "version_mismatch",
                CoreError::DigestMismatch { .. } => "digest_mismatch",
                CoreError::ContextOverflow { .. } => "context_overflow",
                CoreError::Diverged { .. } => "diverged",
                CoreError::FrozenBaseViolated { .. } => "frozen_base_violated",
                CoreError::EmptySplit(_) | CoreError::EmptyInput(_) => "empty_input",
                _ => "invalid_argument",
            },
            AppError::Io(_) => "io",
            AppError::Json(_) => "parse",
            AppError::UnknownUser(_) => "unknown_user",
            AppError::UnknownRequest(_) => "unknown_request",
            AppError::MalformedAbbreviation(_) => "malformed_abbreviation",
            AppError::InvalidUserId(_) => "invalid_user_id",
            AppError::BaseMismatch { .. } => "base_digest_mismatch",
            AppError::PromptShape { .. } => "prompt_shape_mismatch",
            AppError::Unauthorized => "unauthorized",
            AppError::Invalid(_) => "invalid_argument",
        }
    }

    /// `{"error": kind, "message": ..., ...details}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let AppError::BaseMismatch { served, prompt } = self {
            v["served_digest"] = served.clone().into();
            v["prompt_digest"] = prompt.clone().into();
        }
        v
    }
}
