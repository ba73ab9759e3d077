use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step index {t} outside [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed solver history: {0}")]
    MalformedHistory(String),
    #[error("codec has not been fitted")]
    CodecUnfitted,
    #[error("backward called without a cached forward pass")]
    MissingForward,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("unknown prunable unit `{0}`")]
    UnknownUnit(String),
    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("handoff packet: {0}")]
    Packet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
