//! Faithfulness, agreement and classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EmotionLabel, Paradigm, Prediction, NUM_LABELS};
use crate::perturb::normalize_text;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("word set sizes {0} and {1} do not both equal k = {2}")]
    SizeMismatch(usize, usize, usize),
    #[error("prediction for sample '{0}' carries no confidence")]
    NoConfidence(String),
    #[error("source mixes predictions with and without confidence")]
    MixedConfidence,
    #[error("predictions are not aligned: '{0}' vs '{1}'")]
    Misaligned(String, String),
}

/// Confidence drop when the influential words are removed.
pub fn comprehensiveness(conf_full: f64, conf_removed: f64) -> f64 {
    conf_full - conf_removed
}

/// Confidence gap between the full text and the words alone. Negative when
/// the words alone are more convincing.
pub fn sufficiency(conf_full: f64, conf_topk_only: f64) -> f64 {
    conf_full - conf_topk_only
}

/// Fraction of index-aligned positions whose labels differ.
pub fn decision_flip_rate(labels_full: &[EmotionLabel], labels_variant: &[EmotionLabel]) -> Result<f64, MetricsError> {
    if labels_full.len() != labels_variant.len() {
        return Err(MetricsError::LengthMismatch(labels_full.len(), labels_variant.len()));
    }
    if labels_full.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let flips = labels_full.iter().zip(labels_variant).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / labels_full.len() as f64)
}

/// NFC-normalized set view of a word list; duplicates collapse.
pub fn word_set<S: AsRef<str>>(words: &[S]) -> BTreeSet<String> {
    words.iter().map(|w| normalize_text(w.as_ref())).collect()
}

/// `|A ∩ B| / k`; both sets must have exactly `k` distinct words.
pub fn feature_agreement<S: AsRef<str>>(a: &[S], b: &[S], k: usize) -> Result<f64, MetricsError> {
    let (sa, sb) = (word_set(a), word_set(b));
    if sa.len() != k || sb.len() != k || k == 0 {
        return Err(MetricsError::SizeMismatch(sa.len(), sb.len(), k));
    }
    Ok(sa.intersection(&sb).count() as f64 / k as f64)
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn iou<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64, MetricsError> {
    let (sa, sb) = (word_set(a), word_set(b));
    if sa.is_empty() || sb.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64)
}

/// One sample's predictions on the three inputs.
#[derive(Debug, Clone, Copy)]
pub struct VariantTriple<'a> {
    pub full: &'a Prediction,
    pub topk_only: &'a Prediction,
    pub topk_removed: &'a Prediction,
}

impl VariantTriple<'_> {
    fn confidences(&self) -> Option<(f64, f64, f64)> {
        Some((self.full.confidence?, self.topk_only.confidence?, self.topk_removed.confidence?))
    }
}

/// Aggregated faithfulness for one source and paradigm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub source: String,
    pub paradigm: Option<Paradigm>,
    /// Absent for label-only sources.
    pub comp: Option<f64>,
    pub suff: Option<f64>,
    pub df_removed: f64,
    pub df_only: f64,
    pub n: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Averages per-sample metrics over the triples. Comp/Suff are computed only
/// when every prediction carries a confidence.
pub fn faithfulness_row(
    source: &str,
    paradigm: Option<Paradigm>,
    triples: &[VariantTriple<'_>],
) -> Result<FaithfulnessRow, MetricsError> {
    if triples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for t in triples {
        for other in [t.topk_only, t.topk_removed] {
            if other.sample_id != t.full.sample_id {
                return Err(MetricsError::Misaligned(t.full.sample_id.clone(), other.sample_id.clone()));
            }
        }
    }
    let with_conf = triples
        .iter()
        .flat_map(|t| [t.full, t.topk_only, t.topk_removed])
        .filter(|p| p.confidence.is_some())
        .count();
    let (comp, suff) = if with_conf == 3 * triples.len() {
        let confs: Vec<_> = triples.iter().filter_map(VariantTriple::confidences).collect();
        (
            Some(mean(confs.iter().map(|(f, _, r)| comprehensiveness(*f, *r)))),
            Some(mean(confs.iter().map(|(f, o, _)| sufficiency(*f, *o)))),
        )
    } else if with_conf == 0 {
        (None, None)
    } else {
        return Err(MetricsError::MixedConfidence);
    };
    let full: Vec<_> = triples.iter().map(|t| t.full.label).collect();
    let only: Vec<_> = triples.iter().map(|t| t.topk_only.label).collect();
    let removed: Vec<_> = triples.iter().map(|t| t.topk_removed.label).collect();
    Ok(FaithfulnessRow {
        source: source.to_string(),
        paradigm,
        comp,
        suff,
        df_removed: decision_flip_rate(&full, &removed)?,
        df_only: decision_flip_rate(&full, &only)?,
        n: triples.len(),
    })
}

/// One source's explanations and full-text labels, keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgreementSource {
    pub name: String,
    pub explanations: BTreeMap<String, Vec<String>>,
    pub labels: BTreeMap<String, EmotionLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub source_a: String,
    pub source_b: String,
    pub feature_agreement: f64,
    pub iou: f64,
    /// Samples where both sources gave the same label and k distinct words.
    pub n_matched: usize,
    /// Label-matching samples skipped because a word set was not of size k.
    pub n_skipped: usize,
}

/// Symmetric matrix; `None` where a pair never agrees on a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub sources: Vec<String>,
    pub cells: Vec<Vec<Option<AgreementCell>>>,
}

fn agreement_cell(a: &AgreementSource, b: &AgreementSource, k: usize) -> Option<AgreementCell> {
    let mut fa_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut matched = 0;
    let mut skipped = 0;
    for (id, words_a) in &a.explanations {
        let Some(words_b) = b.explanations.get(id) else { continue };
        match (a.labels.get(id), b.labels.get(id)) {
            (Some(la), Some(lb)) if la == lb => {}
            _ => continue,
        }
        match (feature_agreement(words_a, words_b, k), iou(words_a, words_b)) {
            (Ok(fa), Ok(j)) => {
                fa_sum += fa;
                iou_sum += j;
                matched += 1;
            }
            _ => skipped += 1,
        }
    }
    (matched > 0).then(|| AgreementCell {
        source_a: a.name.clone(),
        source_b: b.name.clone(),
        feature_agreement: fa_sum / matched as f64,
        iou: iou_sum / matched as f64,
        n_matched: matched,
        n_skipped: skipped,
    })
}

/// Feature agreement and IoU for every source pair, restricted to samples on
/// which both sources predicted the same label.
pub fn pairwise_agreement(sources: &[AgreementSource], k: usize) -> AgreementMatrix {
    let cells = sources
        .iter()
        .map(|a| sources.iter().map(|b| agreement_cell(a, b, k)).collect())
        .collect();
    AgreementMatrix { sources: sources.iter().map(|s| s.name.clone()).collect(), cells }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: EmotionLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold instances of this class.
    pub support: usize,
    /// Instances predicted as this class.
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; NUM_LABELS]; NUM_LABELS],
    pub n: usize,
    /// Classes never predicted; their precision is reported as 0.
    pub never_predicted: Vec<EmotionLabel>,
    /// Classes absent from the gold labels; their recall is reported as 0.
    pub no_support: Vec<EmotionLabel>,
}

pub fn classification_report(
    predicted: &[EmotionLabel],
    gold: &[EmotionLabel],
) -> Result<ClassificationReport, MetricsError> {
    if predicted.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), gold.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut confusion = [[0usize; NUM_LABELS]; NUM_LABELS];
    for (p, g) in predicted.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
    }
    let mut per_class = Vec::with_capacity(NUM_LABELS);
    let mut never_predicted = Vec::new();
    let mut no_support = Vec::new();
    for label in EmotionLabel::ALL {
        let c = label.index();
        let tp = confusion[c][c];
        let predicted_n: usize = (0..NUM_LABELS).map(|g| confusion[g][c]).sum();
        let support: usize = confusion[c].iter().sum();
        let precision = if predicted_n == 0 {
            never_predicted.push(label);
            0.0
        } else {
            tp as f64 / predicted_n as f64
        };
        let recall = if support == 0 {
            no_support.push(label);
            0.0
        } else {
            tp as f64 / support as f64
        };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.push(ClassMetrics { label, precision, recall, f1, support, predicted: predicted_n });
    }
    let n = predicted.len();
    let correct: usize = (0..NUM_LABELS).map(|c| confusion[c][c]).sum();
    Ok(ClassificationReport {
        macro_precision: mean(per_class.iter().map(|c| c.precision)),
        macro_recall: mean(per_class.iter().map(|c| c.recall)),
        macro_f1: mean(per_class.iter().map(|c| c.f1)),
        accuracy: correct as f64 / n as f64,
        per_class,
        confusion,
        n,
        never_predicted,
        no_support,
    })
}
