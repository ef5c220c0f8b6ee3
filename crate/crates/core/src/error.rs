use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid memory config: {0}")]
    MemoryConfig(String),
    #[error("s grid must be strictly monotone (violated at node {0})")]
    NonMonotoneGrid(usize),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("kernel length {kernel} must be shorter than the tau axis ({taus})")]
    KernelTooLong { kernel: usize, taus: usize },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("invalid environment spec: {0}")]
    EnvSpec(String),
    #[error("action {action} is not valid for task {task}")]
    InvalidAction { task: &'static str, action: usize },
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("invalid train config: {0}")]
    TrainConfig(String),
    #[error("non-finite loss at trial {trial}: {detail}")]
    NonFiniteLoss { trial: usize, detail: String },
    #[error("trajectory is missing cached activations for step {0}")]
    MissingCache(usize),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
