use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("adversary log is not enabled")]
    LogDisabled,
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Model(#[from] veil_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
