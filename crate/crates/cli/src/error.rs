use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: bno_core::Error,
    },

    #[error("acceptance failed: {0}")]
    Acceptance(String),
}

impl CliError {
    /// 0 success, 2 configuration, 3 numeric or runtime failure, 4 failed
    /// acceptance check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::NotFound(_) => 2,
            CliError::Stage { .. } => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

/// Labels core errors with the pipeline stage that produced them.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> CliResult<T>;
}

impl<T> StageExt<T> for bno_core::Result<T> {
    fn stage(self, stage: &str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage {
            stage: stage.to_string(),
            source,
        })
    }
}
