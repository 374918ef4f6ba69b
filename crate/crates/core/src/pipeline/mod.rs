//! Experiment orchestration: corpus loading, splitting, running every source
//! and paradigm, assembling the report bundle and re-verifying it from disk.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::calibrate::CalibrationError;
use crate::domain::EmotionLabel;
use crate::gateway::GatewayError;
use crate::metrics::MetricsError;
use crate::protocol::ProtocolError;

pub mod bundle;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod export;
pub mod human;
mod pool;
pub mod verify;

pub use bundle::{assemble_bundle, ReportBundle, RunArtifacts};
pub use config::{BackendKind, CalibrationSettings, HumanImport, RunConfig, SourceConfig, SplitSpec};
pub use corpus::{balanced_split, load_corpus, Corpus, SplitResult};
pub use experiment::{default_backend, run_calibration, run_experiment, run_experiment_with, RunOutcome};
pub use export::{csv_tables, export_report, load_bundle_dir, markdown_report, percent, ReportFormat};
pub use human::HumanSourceFile;
pub use verify::{verify_bundle, VerifyReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate sample id '{0}'")]
    DuplicateId(String),
    #[error("class {label:?} has {available} samples, split needs {required}")]
    InsufficientClassCount { label: EmotionLabel, available: usize, required: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("bundle is inconsistent: {0}")]
    Bundle(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
