use thiserror::Error;

/// Errors raised by the laboratory library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("position {pos} outside trace of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown task kind `{0}`")]
    UnknownTaskKind(String),

    #[error("kernel budget exceeded: {needed} exceeds limit {limit}")]
    BudgetExceeded { needed: usize, limit: usize },

    #[error("degenerate group: all rewards equal, advantages are zero")]
    DegenerateGroup,

    #[error("advantages do not sum to zero (sum = {0:e})")]
    NotZeroSum(f64),

    #[error("direction vector is zero")]
    ZeroDirection,

    #[error("batch has no mixed-sign group")]
    NoMixedGroup,

    #[error("batch contains a single advantage sign")]
    SingleSign,

    #[error("insufficient records: need {needed} {what}, have {have}")]
    Insufficient {
        what: String,
        needed: usize,
        have: usize,
    },

    #[error("token probability {p} exceeds 1 - p_guard (p_guard = {guard})")]
    ProbabilityTooHigh { p: f64, guard: f64 },

    #[error("group of {group} rollouts exceeds mini-batch capacity {capacity}")]
    GroupTooLarge { group: usize, capacity: usize },

    #[error("tau = {0} outside [0, 0.5]")]
    InvalidTau(f64),

    #[error("masked set contains the candidate token")]
    CandidateMasked,

    #[error("policies have different configurations")]
    ConfigMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
