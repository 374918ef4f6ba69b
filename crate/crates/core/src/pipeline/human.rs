use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::domain::{Explanation, Prediction};

/// Human annotations in the form the pipeline imports: label-only predictions
/// (one per sample and input variant) and stage-1 word selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSourceFile {
    pub source: String,
    pub k: usize,
    pub predictions: Vec<Prediction>,
    pub explanations: Vec<Explanation>,
}

impl HumanSourceFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        file.check().map_err(PipelineError::Config)?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self).expect("human source serializes");
        std::fs::write(path, json + "\n").map_err(|e| PipelineError::io(path, e))
    }

    fn check(&self) -> Result<(), String> {
        if let Some(p) = self.predictions.iter().find(|p| !p.is_human() || p.source != self.source) {
            return Err(format!("prediction for '{}' is not a label-only {} prediction", p.sample_id, self.source));
        }
        if let Some(e) = self.explanations.iter().find(|e| e.source != self.source) {
            return Err(format!("explanation for '{}' has source '{}'", e.sample_id, e.source));
        }
        Ok(())
    }

    /// Same content under another source name.
    pub fn renamed(mut self, name: &str) -> Self {
        self.source = name.to_string();
        for p in &mut self.predictions {
            p.source = name.to_string();
        }
        for e in &mut self.explanations {
            e.source = name.to_string();
        }
        self
    }
}
