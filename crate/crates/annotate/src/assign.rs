use std::collections::BTreeMap;

use faithscope_core::domain::{InputVariant, Sample};
use faithscope_core::perturb::{mask_topk, topk_only_payload, word_tokens};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{AnnotateError, AnnotationRecord, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantText {
    pub variant: InputVariant,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentItem {
    pub sample_id: String,
    /// Full text (stage 1 only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Selectable word tokens of the full text (stage 1 only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tokens: Vec<String>,
    /// Top-k-only and top-k-removed inputs (stage 2 only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub variants: Vec<VariantText>,
    /// Whose stage-1 words built the variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub words_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub annotator_id: String,
    pub stage: Stage,
    pub items: Vec<AssignmentItem>,
}

impl Assignment {
    pub fn contains(&self, sample_id: &str) -> bool {
        self.items.iter().any(|i| i.sample_id == sample_id)
    }
}

/// Where stage-2 variant words come from.
#[derive(Debug, Clone, PartialEq)]
pub enum VariantWords<'a> {
    /// Stage-1 selections of the annotator who labeled the sample.
    Human(&'a [AnnotationRecord]),
    /// Fixed word lists per sample id, e.g. a model's explanations.
    Fixed(&'a BTreeMap<String, Vec<String>>),
}

/// Equal seeded partition of samples over annotators; the first
/// `len % annotators` annotators get one extra sample.
fn partition<'s>(samples: &'s [Sample], annotators: usize, seed: u64) -> Vec<Vec<&'s Sample>> {
    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = sorted.len() / annotators;
    let extra = sorted.len() % annotators;
    let mut out = Vec::with_capacity(annotators);
    let mut rest = sorted.as_slice();
    for i in 0..annotators {
        let n = base + usize::from(i < extra);
        let (head, tail) = rest.split_at(n);
        let mut part = head.to_vec();
        part.sort_by(|a, b| a.id.cmp(&b.id));
        out.push(part);
        rest = tail;
    }
    out
}

/// Stage-2 rotation offset in `1..annotators`, so nobody gets their own set back.
fn rotation(annotators: usize, seed: u64) -> usize {
    1 + (seed as usize) % (annotators - 1)
}

/// Deterministic assignments for one stage. Stage 1 partitions the samples;
/// stage 2 hands annotator `i` the stage-1 set of annotator `i + r`, with
/// both variants built from that set's words.
pub fn create_assignments(
    samples: &[Sample],
    annotators: &[String],
    stage: Stage,
    seed: u64,
    words: VariantWords<'_>,
    k: usize,
    placeholder: &str,
) -> Result<Vec<Assignment>, AnnotateError> {
    let n = annotators.len();
    if n == 0 || samples.len() < n {
        return Err(AnnotateError::InsufficientSamples { available: samples.len(), annotators: n, needed: n.max(1) });
    }
    let parts = partition(samples, n, seed);
    match stage {
        Stage::One => Ok(annotators
            .iter()
            .zip(parts)
            .map(|(a, part)| Assignment {
                annotator_id: a.clone(),
                stage,
                items: part
                    .into_iter()
                    .map(|s| AssignmentItem {
                        sample_id: s.id.clone(),
                        text: Some(s.text.clone()),
                        tokens: word_tokens(&s.text),
                        variants: Vec::new(),
                        words_from: None,
                    })
                    .collect(),
            })
            .collect()),
        Stage::Two => {
            if n < 2 {
                return Err(AnnotateError::InsufficientAnnotators);
            }
            let word_map: BTreeMap<String, (Vec<String>, Option<String>)> = match words {
                VariantWords::Human(records) => records
                    .iter()
                    .filter(|r| r.stage == Stage::One && r.selected_words.len() == k)
                    .map(|r| (r.sample_id.clone(), (r.selected_words.clone(), Some(r.annotator_id.clone()))))
                    .collect(),
                VariantWords::Fixed(m) => m.iter().map(|(id, w)| (id.clone(), (w.clone(), None))).collect(),
            };
            let missing = samples.iter().filter(|s| !word_map.contains_key(&s.id)).count();
            if missing > 0 {
                return Err(AnnotateError::Stage1Incomplete { missing });
            }
            let r = rotation(n, seed);
            let mut out = Vec::with_capacity(n);
            for (i, a) in annotators.iter().enumerate() {
                let mut items = Vec::new();
                for s in &parts[(i + r) % n] {
                    let (w, from) = &word_map[&s.id];
                    let (masked, _) = mask_topk(&s.text, w, placeholder)
                        .map_err(|e| AnnotateError::InvalidWordSelection(e.to_string()))?;
                    items.push(AssignmentItem {
                        sample_id: s.id.clone(),
                        text: None,
                        tokens: Vec::new(),
                        variants: vec![
                            VariantText { variant: InputVariant::TopKOnly, text: topk_only_payload(w) },
                            VariantText { variant: InputVariant::TopKRemoved, text: masked },
                        ],
                        words_from: from.clone(),
                    });
                }
                out.push(Assignment { annotator_id: a.clone(), stage, items });
            }
            Ok(out)
        }
    }
}
