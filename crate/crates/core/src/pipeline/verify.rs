use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::bundle::assemble_bundle;
use super::export::{load_bundle_dir, load_calibration};
use super::PipelineError;

/// Outcome of recomputing a stored bundle from its stored predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    /// Top-level bundle sections compared.
    pub sections_checked: usize,
    pub predictions: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-derives every report table from `predictions.jsonl`, `explanations.jsonl`
/// and the audit log, and compares against the stored bundle.
pub fn verify_bundle(dir: &Path) -> Result<VerifyReport, PipelineError> {
    let (artifacts, stored) = load_bundle_dir(dir)?;
    let recomputed = assemble_bundle(&artifacts)?;
    let a = serde_json::to_value(&stored).expect("bundle serializes");
    let b = serde_json::to_value(&recomputed).expect("bundle serializes");
    let (Value::Object(a), Value::Object(b)) = (a, b) else {
        unreachable!("bundle serializes to an object")
    };
    let mut mismatches: Vec<String> =
        a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| format!("section '{k}' differs")).collect();

    for e in &recomputed.exclusions {
        if e.n_included + e.n_excluded != e.n_evaluation {
            mismatches.push(format!("{} {:?}: included + excluded != evaluated", e.source, e.paradigm));
        }
    }
    if load_calibration(dir)? != recomputed.calibration {
        mismatches.push("calibration.json differs from recomputed calibration".into());
    }
    Ok(VerifyReport { sections_checked: a.len(), predictions: artifacts.predictions.len(), mismatches })
}
