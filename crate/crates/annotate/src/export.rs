use std::collections::BTreeSet;

use faithscope_core::domain::{Explanation, InputVariant, Prediction, Provenance};
use faithscope_core::pipeline::HumanSourceFile;
use serde::{Deserialize, Serialize};

use crate::{AnnotationRecord, Stage};

/// How much of the evaluation set the export covers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub stage1_samples: usize,
    /// Samples with both stage-2 variants labeled.
    pub stage2_samples: usize,
    pub records: usize,
}

/// Converts stored records into the pipeline's human source: stage-1 records
/// become explanations plus full-text labels, stage-2 records become variant
/// labels. Output is sorted by sample id and variant.
pub fn export_human_source(records: &[AnnotationRecord], source: &str, k: usize) -> (HumanSourceFile, Coverage) {
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.sample_id, a.input_variant(), &a.annotator_id).cmp(&(&b.sample_id, b.input_variant(), &b.annotator_id))
    });

    let mut predictions = Vec::new();
    let mut explanations = Vec::new();
    let mut seen = BTreeSet::new();
    for r in sorted {
        // One label per sample and variant; the first annotator (by id) wins.
        if !seen.insert((r.sample_id.clone(), r.input_variant())) {
            continue;
        }
        let raw = Some(Provenance::Human { annotator_id: r.annotator_id.clone() });
        predictions.push(Prediction::label_only(&r.sample_id, source, r.input_variant(), r.label, raw));
        if r.stage == Stage::One {
            explanations.push(Explanation {
                sample_id: r.sample_id.clone(),
                source: source.to_string(),
                paradigm: None,
                words: r.selected_words.clone(),
            });
        }
    }

    let ids = |v: InputVariant| -> BTreeSet<&str> {
        predictions.iter().filter(|p| p.variant == v).map(|p| p.sample_id.as_str()).collect()
    };
    let only = ids(InputVariant::TopKOnly);
    let coverage = Coverage {
        stage1_samples: ids(InputVariant::FullText).len(),
        stage2_samples: ids(InputVariant::TopKRemoved).intersection(&only).count(),
        records: records.len(),
    };
    (HumanSourceFile { source: source.to_string(), k, predictions, explanations }, coverage)
}
