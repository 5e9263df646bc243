use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NotScalarRoot { rows: usize, cols: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("base {base} is not positive but grade {grade} is fractional")]
    NegativeBaseFractionalGrade { base: f64, grade: f64 },
    #[error("weight {weight} is not positive but grade {grade} is fractional")]
    NegativeWeightFractionalGrade { weight: f64, grade: f64 },
    #[error("invalid grading spec: {0}")]
    InvalidSpec(String),
    #[error("grade {0} must be strictly positive")]
    NonPositiveGrade(f64),
    #[error("invalid grade {0}: grades must be finite and non-negative")]
    InvalidGrade(f64),
    #[error("multiplicative factor {0} is not positive under a fractional grade")]
    DomainError(f64),
    #[error("prediction {0} is outside (0, 1]")]
    ProbabilityDomain(f64),
    #[error("token {token} outside vocabulary 1..={vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("position {position} outside 1..={max}")]
    PositionOutOfRange { position: usize, max: usize },
    #[error("vector is zero after grading and cannot be normalized")]
    ZeroAfterGrading,
    #[error("matrix is not row-stochastic: {0}")]
    NotRowStochastic(String),
    #[error("step {t} outside 0..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("invalid lambda {0}: must exceed 1")]
    InvalidLambda(f64),
    #[error("training diverged at step {step}")]
    DivergenceDetected {
        step: usize,
        last_good: Box<crate::training::TrainOutcome>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
