use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule parameters: {0}")]
    InvalidSchedule(String),

    #[error("schedule overflow: beta[{t}] = {beta} >= 1 (raise T or lower c1)")]
    ScheduleOverflow { t: usize, beta: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("abar = {0} outside (0, 1]")]
    AbarDomain(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate marginal: component {component} has a singular covariance")]
    DegenerateMarginal { component: usize },

    #[error("step index {t} outside 1..={max}")]
    StepIndex { t: usize, max: usize },

    #[error("score blowup at step {t}")]
    ScoreBlowup { t: usize },

    #[error("degenerate momentum denominator at step {t}")]
    DegenerateMomentum { t: usize },

    #[error("degenerate denominator abar_t = abar_(t+1) at step {t}")]
    DegenerateDenominator { t: usize },

    #[error("arcsin argument exceeds 1 by {excess:e} at step {t}")]
    ArcsinDomain { t: usize, excess: f64 },

    #[error("invalid sampler spec: {0}")]
    InvalidSampler(String),

    #[error("propagation requires affine score: {0}")]
    NonAffine(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ScoreBlowup { .. }
            | Error::DegenerateMomentum { .. }
            | Error::DegenerateDenominator { .. }
            | Error::ArcsinDomain { .. }
            | Error::DegenerateMarginal { .. }
            | Error::NonAffine(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
