use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown beta schedule kind `{0}` (expected `linear` or `scaled_linear`)")]
    UnknownScheduleKind(String),

    #[error("timestep {t} out of range for a schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("reverse step requires t >= 1")]
    FinalTimestep,

    #[error("ancestral step at t = {0} requires a noise vector")]
    MissingNoise(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("mask has zero mean")]
    ZeroMeanMask,

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("invalid thresholds: {0}")]
    InvalidThreshold(String),

    #[error("s' = {s_prime} lies outside [1, {s}]")]
    ScaleOutOfRange { s_prime: f64, s: f64 },

    #[error("policy `{0}` is flagged but no target prediction was supplied")]
    MissingTarget(&'static str),

    #[error("non-finite gradient during embedding optimization")]
    NonFiniteGradient,

    #[error("alternative provider exhausted before yielding any candidate")]
    ProviderExhausted,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("infeasible testbed configuration: {0}")]
    InfeasibleConfig(String),

    #[error("unknown condition {0}")]
    UnknownCondition(usize),

    #[error("denoiser does not support {0}")]
    Unsupported(&'static str),

    #[error("denoiser backend failure: {0}")]
    Backend(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
