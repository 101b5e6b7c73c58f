use std::path::PathBuf;

/// Errors produced by the restoration library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular step: alpha is zero at t={t}")]
    SingularStep { t: usize },

    #[error("no further steps: state is already at t=1")]
    NoFurtherSteps,

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training failure in {stage} at step {step}: {reason}")]
    TrainingFailure {
        stage: &'static str,
        step: usize,
        reason: String,
    },

    #[error("inference failure: {0}")]
    InferenceFailure(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("embedder quality too low: held-out accuracy {accuracy:.3} < {threshold:.3}")]
    EmbedderQuality { accuracy: f64, threshold: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used in structured error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::SingularStep { .. } => "singular-step",
            Error::NoFurtherSteps => "no-further-steps",
            Error::UnknownToken(_) => "unknown-token",
            Error::Conflict(_) => "conflict",
            Error::Precondition(_) => "precondition",
            Error::TrainingFailure { .. } => "training-failure",
            Error::InferenceFailure(_) => "inference-failure",
            Error::InvalidState(_) => "invalid-state",
            Error::EmbedderQuality { .. } => "embedder-quality",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
