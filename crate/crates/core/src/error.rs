use thiserror::Error;

/// Errors surfaced by the simulator, models, and pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid opportunity: {0}")]
    InvalidOpportunity(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("constraint length mismatch: params carry {params} lambdas, {constraints} constraints given")]
    ConstraintMismatch { params: usize, constraints: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("backend unavailable after retries: {0}")]
    BackendUnavailable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
