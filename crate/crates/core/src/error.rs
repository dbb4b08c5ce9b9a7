use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration (scenario, bench spec, flags).
    #[error("config error: {0}")]
    Config(String),
    /// The scenario parsed but failed task validation.
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("unknown plant model `{0}`")]
    UnknownModel(String),
    #[error("unknown bundled file `{0}`")]
    UnknownBundle(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
