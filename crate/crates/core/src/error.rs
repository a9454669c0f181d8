use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample set `{0}` is empty after routing")]
    EmptyClass(&'static str),

    #[error("empty sublevel set: no point with h <= 0 found in the domain")]
    EmptySublevelSet,

    #[error("degenerate level schedule: gamma0 = {gamma0} is not below target {target}")]
    DegenerateSchedule { gamma0: f64, target: f64 },

    #[error("rejection sampling budget of {budget} draws exhausted after {accepted} accepted points")]
    RejectionBudget { budget: u64, accepted: u64 },

    #[error("segment {segment} retained no grid points although its band is non-degenerate")]
    EmptySegment { segment: usize },

    #[error("non-finite loss at step {step} of stage {stage}")]
    NonFiniteLoss { stage: u8, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
