use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no model loaded")]
    NotLoaded,
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("inconsistent artifacts: {0}")]
    Inconsistent(String),
    #[error("retrieval failed: {0}")]
    Internal(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::BadRequest(_) => "bad_request",
            ServeError::NotLoaded => "not_loaded",
            ServeError::Artifact(_) => "artifact_error",
            ServeError::Inconsistent(_) => "inconsistent_artifacts",
            ServeError::Internal(_) => "internal",
        }
    }
}
