//! Experiment harness around `sslseg-core`: dataset assembly, pretraining,
//! finetuning sweeps over the labeled-set size, evaluation and reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

use sslseg_core::data::DataError;
use sslseg_core::model::ModelError;
use sslseg_core::train::TrainError;
use sslseg_core::TensorError;
use thiserror::Error;

pub use config::{ExperimentConfig, Method};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::Unsatisfiable(_) | DataError::OverSubscribed { .. } => {
                CliError::Config(e.to_string())
            }
            DataError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptyDataset(_) => CliError::Data(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
