use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration file, override or command-line value.
    #[error("config: {0}")]
    Config(String),

    /// Dataset files missing or malformed.
    #[error("data: {0}")]
    Data(String),

    /// CSV input that does not follow the documented schema.
    #[error("schema: {0}")]
    Schema(String),

    #[error("output directory {0} is locked by another run (remove run.lock if that run is dead)")]
    Locked(PathBuf),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Core(#[from] nofrost::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HarnessError {
    /// Whether the failure is a user configuration problem (exit code 1)
    /// rather than a runtime failure (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Schema(_)
                | HarnessError::Core(nofrost::Error::InvalidArgument(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}
