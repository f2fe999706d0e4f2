use thiserror::Error;
use wayfind_core::backends::BackendError;
use wayfind_core::datasets::DataError;
use wayfind_core::env_model::EnvError;
use wayfind_core::metrics::MetricsError;
use wayfind_core::navigation::NavError;
use wayfind_core::synthesis::SynthesisError;
use wayfind_core::vqa_chat::CaptionError;

/// Top-level failure, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CaptionError> for CliError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Backend(b) => b.into(),
            SynthesisError::Caption(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NavError> for CliError {
    fn from(e: NavError) -> Self {
        match e {
            NavError::Backend(b) => b.into(),
            NavError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}
