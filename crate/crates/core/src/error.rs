//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caption token is not part of the toy vocabulary.
    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    /// Caption exceeds the configured sequence length.
    #[error("caption has {len} tokens but the sequence length is {max}")]
    CaptionTooLong { len: usize, max: usize },

    /// A configuration value violates its invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Structural problem in a binary container (magic, version, truncation).
    #[error("container format error: {0}")]
    Format(String),

    /// Well-formed data that violates a semantic invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A tensor name was not found in a container.
    #[error("tensor not found: {0:?}")]
    MissingTensor(String),

    /// A dataset row failed to parse or violated the schema.
    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    /// An image reference does not resolve in the embedding container.
    #[error("dangling image reference: {0:?}")]
    DanglingImage(String),

    /// Zero-norm vector where a direction is required.
    #[error("zero-norm vector: {0}")]
    ZeroNorm(&'static str),

    /// Non-finite value in an input that must be finite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A stage was started without its prerequisite checkpoints.
    #[error("missing prerequisite checkpoint: {0}")]
    MissingCheckpoint(String),

    /// Gate training needs both caption classes present.
    #[error("gate training requires both negated and plain captions")]
    SingleClass,

    /// Strength label outside {strong, moderate, weak, weakest}.
    #[error("unknown negation strength: {0:?}")]
    UnknownStrength(String),

    /// Ablation name outside the supported set.
    #[error("unknown ablation setting: {0:?}")]
    UnknownAblation(String),

    /// MCQ answer index out of range.
    #[error("answer index {answer} out of range for {choices} choices")]
    AnswerOutOfRange { answer: usize, choices: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    /// The CLI maps these to exit code 1 and everything else to 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
