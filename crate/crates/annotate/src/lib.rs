//! Human annotation collection for the two-stage protocol.
//!
//! Stage 1: each annotator labels a disjoint set of full texts and picks the
//! k words that drove the decision. Stage 2: each annotator labels the
//! top-k-only and top-k-removed variants of samples that *another*
//! annotator handled in stage 1. Records live in an append-only JSONL log.

use faithscope_core::domain::{EmotionLabel, InputVariant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod assign;
pub mod export;
pub mod server;
pub mod store;

pub use assign::{create_assignments, Assignment, AssignmentItem, VariantText, VariantWords};
pub use export::{export_human_source, Coverage};
pub use server::{router, serve, AnnotationService, Progress, ServiceConfig};
pub use store::AnnotationStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("stage must be 1 or 2, got {other}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// What an annotator submits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator_id: String,
    pub sample_id: String,
    pub stage: Stage,
    /// Required in stage 2 (`TopKOnly` or `TopKRemoved`); absent in stage 1.
    #[serde(default)]
    pub variant: Option<InputVariant>,
    pub label: EmotionLabel,
    #[serde(default)]
    pub selected_words: Vec<String>,
}

/// A stored annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub annotator_id: String,
    pub sample_id: String,
    pub stage: Stage,
    pub variant: Option<InputVariant>,
    pub label: EmotionLabel,
    pub selected_words: Vec<String>,
    pub verified_by: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl AnnotationRecord {
    /// Input variant the label refers to.
    pub fn input_variant(&self) -> InputVariant {
        self.variant.unwrap_or(InputVariant::FullText)
    }
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("need at least {needed} samples for {annotators} annotators, have {available}")]
    InsufficientSamples { available: usize, annotators: usize, needed: usize },
    #[error("stage 2 needs at least two annotators")]
    InsufficientAnnotators,
    #[error("stage 1 is incomplete: {missing} sample(s) lack a stage-1 annotation")]
    Stage1Incomplete { missing: usize },
    #[error("unknown annotator '{0}'")]
    UnknownAnnotator(String),
    #[error("sample '{sample_id}' is not assigned to '{annotator_id}' in stage {stage}")]
    NotAssigned { annotator_id: String, sample_id: String, stage: u8 },
    #[error("invalid word selection: {0}")]
    InvalidWordSelection(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("annotation already submitted for this annotator, sample, stage and variant")]
    Duplicate,
    #[error("unknown record '{0}'")]
    UnknownRecord(String),
    #[error("annotators cannot verify their own records")]
    SelfVerification,
    #[error("record '{0}' is already verified")]
    AlreadyVerified(String),
    #[error("store I/O error at {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("corrupt store line {line}: {message}")]
    Corrupt { line: usize, message: String },
}
