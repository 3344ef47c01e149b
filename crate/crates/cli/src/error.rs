use std::path::PathBuf;

use thiserror::Error;
use vtsyn_core::alignment::AlignmentError;
use vtsyn_core::corpus::CorpusError;
use vtsyn_core::metrics::MetricError;
use vtsyn_core::signal::SignalFormatError;
use vtsyn_models::ModelError;

/// Every failure maps to one exit code: 2 config, 3 I/O, 4 data, 5 training.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Data(_) => 4,
            Self::Training(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { path, source } => Self::Io { path, source },
            CorpusError::Signal {
                path,
                source: SignalFormatError::Io(source),
            } => Self::Io { path, source },
            CorpusError::InvalidParams(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        match e {
            AlignmentError::InvalidConfig(_) => Self::Config(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => Self::Io { path, source },
            ModelError::Config(_)
            | ModelError::CheckpointMismatch(_)
            | ModelError::BackboneUnavailable(_)
            | ModelError::Json { .. } => Self::Config(e.to_string()),
            ModelError::Shape(_) | ModelError::Data(_) => Self::Data(e.to_string()),
            ModelError::TrainingDiverged { .. }
            | ModelError::SamplingDiverged { .. }
            | ModelError::Step { .. }
            | ModelError::Candle(_) => Self::Training(e.to_string()),
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        ModelError::Candle(e).into()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
