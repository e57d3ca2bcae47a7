use std::path::PathBuf;

use dcvqe::data_io::DataError;
use dcvqe::model::ModelError;
use dcvqe::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Numeric(_) => 3,
            Self::Train(e) if e.is_numeric() => 3,
            Self::Train(TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) | TrainError::Loss(_)) => 1,
            Self::Model(ModelError::Config(_)) => 1,
            Self::Data(DataError::Split(_) | DataError::Synth(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
