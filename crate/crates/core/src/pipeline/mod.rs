//! Experiment orchestration: planted data, the staged grid
//! (base, calibration, prehab, surgery, rehab) and report emission.

mod config;
mod data;
mod report;
mod run;

pub use config::{CellFilter, CompressionSpec, ExperimentConfig, ModelSpec, StageToggles};
pub use data::{gen_dataset, DatasetSpec, PlantedDataset};
pub use report::{
    emit_report, median, relative_gain, ExperimentReport, GainRecord, GroupSummary, LayerSpectrum, ReportFormat,
    StageKind, StageRecord, StageStatus, CSV_COLUMNS,
};
pub use run::{run_experiment, DatasetRecord, RunOptions, Step};

use crate::calibration::CalibrationError;
use crate::checkpoint::CheckpointError;
use crate::compressors::CompressionError;
use crate::model::ModelError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("teacher classes could not be balanced in {attempts} attempts")]
    Unbalanced { attempts: usize },
    #[error("interrupted after {completed} computed stages")]
    Interrupted { completed: usize },
    #[error("report: {0}")]
    Report(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
