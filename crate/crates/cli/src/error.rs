//! Error classification for process exit codes.
//!
//! Every failure maps to one of four categories with a stable exit code, and
//! serializes to a machine-readable record on stderr: 2 config, 3 data,
//! 4 training, 5 evaluation.

use maskvar_core::dataset::DatasetError;
use maskvar_core::detect::DetectError;
use maskvar_core::eval::EvalError;
use maskvar_core::inject::InjectError;
use maskvar_core::net::NetError;
use maskvar_core::train::TrainError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Train(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(_) => 4,
            CliError::Eval(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Train(_) => "training",
            CliError::Eval(_) => "evaluation",
        }
    }

    /// Machine-readable error record printed to stderr before exiting.
    pub fn record(&self) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<InjectError> for CliError {
    fn from(e: InjectError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Train(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        // Data problems surfacing through the training entry points keep
        // their data classification.
        match e {
            TrainError::Dataset(d) => CliError::Data(d.to_string()),
            TrainError::Inject(i) => CliError::Data(i.to_string()),
            other => CliError::Train(other.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Dataset(d) => CliError::Data(d.to_string()),
            other => CliError::Eval(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e.to_string())
    }
}

/// IO failure while writing an artifact under the run directory.
pub fn artifact_io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("writing {}: {e}", path.display()))
}
