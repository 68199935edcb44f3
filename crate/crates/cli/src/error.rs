use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rtlasso::io::IngestError;
use rtlasso::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("ingestion: {0}")]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Pipeline(PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Config(_) => 2,
            Self::Ingest(_) => 3,
            Self::Pipeline(PipelineError::Config(_)) => 2,
            Self::Pipeline(PipelineError::Data(_)) => 3,
            Self::Pipeline(_) => 4,
            Self::Io { .. } => 5,
        })
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::Pipeline(e)
    }
}
