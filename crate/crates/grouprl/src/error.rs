use thiserror::Error;

/// Errors surfaced by validation and numeric failure paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error("group too small: need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward at index {index}: {value}")]
    NonFiniteReward { index: usize, value: f64 },
    #[error("smoothing temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("sampling temperature must be positive, got {0}")]
    NonPositiveSamplingTemperature(f64),
    #[error("token {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("prompt id {prompt} out of range for {count} prompts")]
    PromptOutOfRange { prompt: usize, count: usize },
    #[error("token sequence length {got} does not match policy positions {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("policy shapes differ: ({0}, {1}, {2}) vs ({3}, {4}, {5})")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("non-finite logit at flat index {0}")]
    NonFiniteLogit(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("prompt pool is empty")]
    EmptyPromptPool,
    #[error("validation prompt {0} overlaps the training pool")]
    PromptPoolOverlap(usize),
    #[error("empty prompt set")]
    EmptyPromptSet,
    #[error("non-finite gradient at step {step} (norm {norm})")]
    NonFiniteGradient { step: usize, norm: f64 },
    #[error("run logs are not paired: {0}")]
    UnpairedLogs(String),
    #[error("unknown check name: {0}")]
    UnknownCheck(String),
    #[error("checkpoint parse error: {0}")]
    CheckpointFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
