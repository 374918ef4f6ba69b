use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::config::CalibrationSettings;
use super::PipelineError;
use crate::calibrate::{ece, fit_temperature, reliability_bins, CalibrationModel, ReliabilityBin};
use crate::domain::{EmotionLabel, Explanation, InputVariant, Paradigm, Prediction, Sample, Split};
use crate::metrics::{
    classification_report, faithfulness_row, pairwise_agreement, AgreementMatrix, AgreementSource,
    ClassificationReport, FaithfulnessRow, VariantTriple,
};
use crate::perturb::MaskingReport;
use crate::protocol::{MalformedOutput, Transcript};

/// Settings and names needed to reassemble a bundle from stored artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub k: usize,
    pub paradigms: Vec<Paradigm>,
    /// Model sources, in configuration order.
    pub sources: Vec<String>,
    pub human: Option<String>,
    pub calibration: CalibrationSettings,
    pub skipped_corpus_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingRecord {
    pub source: String,
    pub paradigm: Paradigm,
    pub report: MaskingReport,
}

/// A per-sample failure that is not a malformed completion (e.g. retries exhausted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub source: String,
    pub paradigm: Paradigm,
    pub sample_id: String,
    pub split: Split,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub seed: u64,
    pub malformed: Vec<MalformedOutput>,
    pub masking: Vec<MaskingRecord>,
    pub failures: Vec<SampleFailure>,
}

/// Everything a run produced before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub meta: RunMeta,
    /// Evaluation and calibration samples, each tagged with its split.
    pub samples: Vec<Sample>,
    pub predictions: Vec<Prediction>,
    pub explanations: Vec<Explanation>,
    pub transcripts: Vec<Transcript>,
    pub audit: AuditLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEntry {
    pub source: String,
    pub paradigm: Option<Paradigm>,
    pub report: ClassificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub source: String,
    pub paradigm: Paradigm,
    pub model: CalibrationModel,
    pub ece_calibration_pre: f64,
    pub ece_calibration_post: f64,
    /// Absent when no evaluation sample survived exclusion.
    pub ece_evaluation_pre: Option<f64>,
    pub ece_evaluation_post: Option<f64>,
    pub n_calibration: usize,
    pub n_evaluation: usize,
    /// Calibration samples whose flow did not yield a usable prediction.
    pub calibration_excluded: Vec<String>,
}

/// Mean drop in confidence caused by temperature scaling, per input variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReduction {
    pub source: String,
    pub paradigm: Paradigm,
    pub full_text: f64,
    pub topk_only: f64,
    pub topk_removed: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementEntry {
    pub paradigm: Paradigm,
    pub matrix: AgreementMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySeries {
    pub source: String,
    pub paradigm: Paradigm,
    pub split: Split,
    pub scaled: bool,
    pub bins: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSummary {
    pub source: String,
    pub paradigm: Option<Paradigm>,
    pub n_evaluation: usize,
    pub n_included: usize,
    pub n_excluded: usize,
    pub excluded: Vec<Exclusion>,
    /// Masking reports where a word matched only as a substring.
    pub masking_fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub seed: u64,
    pub k: usize,
    pub fit_bins: usize,
    pub diagram_bins: usize,
    pub n_evaluation: usize,
    pub n_calibration: usize,
    pub skipped_corpus_rows: usize,
    pub classification: Vec<ClassificationEntry>,
    pub faithfulness_pre: Vec<FaithfulnessRow>,
    pub faithfulness_post: Vec<FaithfulnessRow>,
    pub calibration: Vec<CalibrationEntry>,
    pub confidence_reduction: Vec<ConfidenceReduction>,
    pub agreement: Vec<AgreementEntry>,
    pub reliability: Vec<ReliabilitySeries>,
    pub exclusions: Vec<ExclusionSummary>,
}

type PredKey<'a> = (&'a str, Option<Paradigm>, InputVariant, &'a str);

struct Index<'a> {
    predictions: BTreeMap<PredKey<'a>, &'a Prediction>,
    explanations: BTreeMap<(&'a str, Option<Paradigm>, &'a str), &'a Explanation>,
    masking: BTreeMap<(&'a str, Paradigm, &'a str), &'a MaskingReport>,
    problems: BTreeMap<(&'a str, Paradigm, &'a str), Vec<String>>,
}

impl<'a> Index<'a> {
    fn new(a: &'a RunArtifacts) -> Result<Self, PipelineError> {
        let mut predictions = BTreeMap::new();
        for p in &a.predictions {
            let key = (p.source.as_str(), p.paradigm, p.variant, p.sample_id.as_str());
            if predictions.insert(key, p).is_some() {
                return Err(PipelineError::Bundle(format!("duplicate prediction {key:?}")));
            }
        }
        let mut explanations = BTreeMap::new();
        for e in &a.explanations {
            let key = (e.source.as_str(), e.paradigm, e.sample_id.as_str());
            if explanations.insert(key, e).is_some() {
                return Err(PipelineError::Bundle(format!("duplicate explanation {key:?}")));
            }
        }
        let masking = a
            .audit
            .masking
            .iter()
            .map(|m| ((m.source.as_str(), m.paradigm, m.report.sample_id.as_str()), &m.report))
            .collect();
        let mut problems: BTreeMap<_, Vec<String>> = BTreeMap::new();
        for m in &a.audit.malformed {
            let Some(p) = m.paradigm else { continue };
            problems
                .entry((m.source.as_str(), p, m.sample_id.as_str()))
                .or_default()
                .push(format!("malformed {:?} output: {:?}", m.stage, m.reason));
        }
        for f in &a.audit.failures {
            problems
                .entry((f.source.as_str(), f.paradigm, f.sample_id.as_str()))
                .or_default()
                .push(f.message.clone());
        }
        Ok(Self { predictions, explanations, masking, problems })
    }

    fn pred(&self, source: &'a str, paradigm: Option<Paradigm>, variant: InputVariant, id: &'a str) -> Option<&'a Prediction> {
        self.predictions.get(&(source, paradigm, variant, id)).copied()
    }
}

/// A model source's usable evaluation samples for one paradigm.
struct EvalSet<'a> {
    ids: Vec<&'a str>,
    full: Vec<&'a Prediction>,
    only: Vec<&'a Prediction>,
    removed: Vec<&'a Prediction>,
    explanations: Vec<&'a Explanation>,
    summary: ExclusionSummary,
}

fn model_eval_set<'a>(idx: &Index<'a>, eval: &[&'a Sample], source: &'a str, paradigm: Paradigm) -> EvalSet<'a> {
    let mut set = EvalSet {
        ids: Vec::new(),
        full: Vec::new(),
        only: Vec::new(),
        removed: Vec::new(),
        explanations: Vec::new(),
        summary: ExclusionSummary {
            source: source.to_string(),
            paradigm: Some(paradigm),
            n_evaluation: eval.len(),
            n_included: 0,
            n_excluded: 0,
            excluded: Vec::new(),
            masking_fallbacks: Vec::new(),
        },
    };
    let p = Some(paradigm);
    for s in eval {
        let id = s.id.as_str();
        let mut reasons = idx.problems.get(&(source, paradigm, id)).cloned().unwrap_or_default();
        let masking = idx.masking.get(&(source, paradigm, id));
        if let Some(m) = masking {
            if !m.unmatched.is_empty() {
                reasons.push(format!("explanation words not found in text: {}", m.unmatched.join(", ")));
            }
            if m.fallback_used {
                set.summary.masking_fallbacks.push(id.to_string());
            }
        }
        let parts = (
            idx.pred(source, p, InputVariant::FullText, id),
            idx.pred(source, p, InputVariant::TopKOnly, id),
            idx.pred(source, p, InputVariant::TopKRemoved, id),
            idx.explanations.get(&(source, p, id)).copied(),
        );
        match parts {
            (Some(f), Some(o), Some(r), Some(e)) if reasons.is_empty() && masking.is_some() => {
                set.ids.push(id);
                set.full.push(f);
                set.only.push(o);
                set.removed.push(r);
                set.explanations.push(e);
            }
            _ => {
                if reasons.is_empty() {
                    reasons.push("incomplete outputs".into());
                }
                set.summary.excluded.push(Exclusion { sample_id: id.to_string(), reasons });
            }
        }
    }
    set.summary.n_included = set.ids.len();
    set.summary.n_excluded = set.summary.excluded.len();
    set
}

fn triples<'a>(full: &[&'a Prediction], only: &[&'a Prediction], removed: &[&'a Prediction]) -> Vec<VariantTriple<'a>> {
    full.iter()
        .zip(only)
        .zip(removed)
        .map(|((f, o), r)| VariantTriple { full: f, topk_only: o, topk_removed: r })
        .collect()
}

fn correctness(preds: &[&Prediction], gold: &BTreeMap<&str, EmotionLabel>) -> Vec<bool> {
    preds.iter().map(|p| gold.get(p.sample_id.as_str()) == Some(&p.label)).collect()
}

fn confidences(preds: &[&Prediction]) -> Vec<f64> {
    preds.iter().map(|p| p.confidence.expect("model predictions carry confidence")).collect()
}

fn mean_drop(pre: &[&Prediction], post: &[Prediction]) -> f64 {
    let total: f64 = pre
        .iter()
        .zip(post)
        .map(|(a, b)| a.confidence.unwrap_or(0.0) - b.confidence.unwrap_or(0.0))
        .sum();
    total / pre.len() as f64
}

/// Aggregates stored predictions into the report tables. Pure: the same
/// artifacts always give the same bundle.
pub fn assemble_bundle(a: &RunArtifacts) -> Result<ReportBundle, PipelineError> {
    let idx = Index::new(a)?;
    let settings = a.meta.calibration;
    let eval: Vec<&Sample> = a.samples.iter().filter(|s| s.split == Some(Split::Evaluation)).collect();
    let calib: Vec<&Sample> = a.samples.iter().filter(|s| s.split == Some(Split::Calibration)).collect();
    let gold: BTreeMap<&str, EmotionLabel> = a.samples.iter().map(|s| (s.id.as_str(), s.gold)).collect();
    let gold_of = |preds: &[&Prediction]| -> Vec<EmotionLabel> { preds.iter().map(|p| gold[p.sample_id.as_str()]).collect() };

    let mut b = ReportBundle {
        seed: a.meta.seed,
        k: a.meta.k,
        fit_bins: settings.fit_bins,
        diagram_bins: settings.diagram_bins,
        n_evaluation: eval.len(),
        n_calibration: calib.len(),
        skipped_corpus_rows: a.meta.skipped_corpus_rows,
        classification: Vec::new(),
        faithfulness_pre: Vec::new(),
        faithfulness_post: Vec::new(),
        calibration: Vec::new(),
        confidence_reduction: Vec::new(),
        agreement: Vec::new(),
        reliability: Vec::new(),
        exclusions: Vec::new(),
    };
    let mut agreement_sources: BTreeMap<Paradigm, Vec<AgreementSource>> = BTreeMap::new();

    for source in &a.meta.sources {
        for &paradigm in &a.meta.paradigms {
            let set = model_eval_set(&idx, &eval, source, paradigm);
            b.exclusions.push(set.summary.clone());

            let mut calib_preds = Vec::new();
            let mut calibration_excluded = Vec::new();
            for s in &calib {
                let usable = idx.problems.get(&(source.as_str(), paradigm, s.id.as_str())).is_none();
                match idx.pred(source, Some(paradigm), InputVariant::FullText, &s.id) {
                    Some(p) if usable => calib_preds.push(p),
                    _ => calibration_excluded.push(s.id.clone()),
                }
            }
            if calib_preds.is_empty() {
                return Err(PipelineError::Bundle(format!(
                    "{source} {}: no usable calibration predictions",
                    paradigm.as_str()
                )));
            }
            let fit_input: Vec<_> = calib_preds
                .iter()
                .map(|p| (p.distribution.expect("model predictions carry a distribution"), gold[p.sample_id.as_str()]))
                .collect();
            let model = fit_temperature(&fit_input, settings.grid, settings.fit_bins)?;
            let calib_post: Vec<Prediction> =
                calib_preds.iter().map(|p| p.with_distribution(model.apply(&p.distribution.unwrap()))).collect();
            let calib_post_refs: Vec<&Prediction> = calib_post.iter().collect();
            let calib_correct = correctness(&calib_preds, &gold);
            for (scaled, preds) in [(false, &calib_preds), (true, &calib_post_refs)] {
                b.reliability.push(ReliabilitySeries {
                    source: source.clone(),
                    paradigm,
                    split: Split::Calibration,
                    scaled,
                    bins: reliability_bins(&confidences(preds), &calib_correct, settings.diagram_bins)?,
                });
            }

            if set.ids.is_empty() {
                b.calibration.push(CalibrationEntry {
                    source: source.clone(),
                    paradigm,
                    model,
                    ece_calibration_pre: model.fit_ece_before,
                    ece_calibration_post: model.fit_ece_after,
                    ece_evaluation_pre: None,
                    ece_evaluation_post: None,
                    n_calibration: calib_preds.len(),
                    n_evaluation: 0,
                    calibration_excluded,
                });
                continue;
            }

            let scale = |preds: &[&Prediction]| -> Vec<Prediction> {
                preds.iter().map(|p| p.with_distribution(model.apply(&p.distribution.unwrap()))).collect()
            };
            let (full_post, only_post, removed_post) = (scale(&set.full), scale(&set.only), scale(&set.removed));
            let full_post_r: Vec<&Prediction> = full_post.iter().collect();
            let only_post_r: Vec<&Prediction> = only_post.iter().collect();
            let removed_post_r: Vec<&Prediction> = removed_post.iter().collect();

            let labels: Vec<EmotionLabel> = set.full.iter().map(|p| p.label).collect();
            b.classification.push(ClassificationEntry {
                source: source.clone(),
                paradigm: Some(paradigm),
                report: classification_report(&labels, &gold_of(&set.full))?,
            });
            b.faithfulness_pre
                .push(faithfulness_row(source, Some(paradigm), &triples(&set.full, &set.only, &set.removed))?);
            b.faithfulness_post
                .push(faithfulness_row(source, Some(paradigm), &triples(&full_post_r, &only_post_r, &removed_post_r))?);

            let eval_correct = correctness(&set.full, &gold);
            b.calibration.push(CalibrationEntry {
                source: source.clone(),
                paradigm,
                model,
                ece_calibration_pre: model.fit_ece_before,
                ece_calibration_post: model.fit_ece_after,
                ece_evaluation_pre: Some(ece(&confidences(&set.full), &eval_correct, settings.fit_bins)?),
                ece_evaluation_post: Some(ece(&confidences(&full_post_r), &eval_correct, settings.fit_bins)?),
                n_calibration: calib_preds.len(),
                n_evaluation: set.ids.len(),
                calibration_excluded,
            });
            for (scaled, preds) in [(false, &set.full), (true, &full_post_r)] {
                b.reliability.push(ReliabilitySeries {
                    source: source.clone(),
                    paradigm,
                    split: Split::Evaluation,
                    scaled,
                    bins: reliability_bins(&confidences(preds), &eval_correct, settings.diagram_bins)?,
                });
            }
            b.confidence_reduction.push(ConfidenceReduction {
                source: source.clone(),
                paradigm,
                full_text: mean_drop(&set.full, &full_post),
                topk_only: mean_drop(&set.only, &only_post),
                topk_removed: mean_drop(&set.removed, &removed_post),
                n: set.ids.len(),
            });

            agreement_sources.entry(paradigm).or_default().push(AgreementSource {
                name: source.clone(),
                explanations: set.explanations.iter().map(|e| (e.sample_id.clone(), e.words.clone())).collect(),
                labels: set.full.iter().map(|p| (p.sample_id.clone(), p.label)).collect(),
            });
        }
    }

    if let Some(human) = &a.meta.human {
        let mut summary = ExclusionSummary {
            source: human.clone(),
            paradigm: None,
            n_evaluation: eval.len(),
            n_included: 0,
            n_excluded: 0,
            excluded: Vec::new(),
            masking_fallbacks: Vec::new(),
        };
        let mut full = Vec::new();
        for s in &eval {
            match idx.pred(human, None, InputVariant::FullText, &s.id) {
                Some(p) => full.push(p),
                None => summary.excluded.push(Exclusion { sample_id: s.id.clone(), reasons: vec!["not annotated".into()] }),
            }
        }
        summary.n_included = full.len();
        summary.n_excluded = summary.excluded.len();
        b.exclusions.push(summary);

        if !full.is_empty() {
            let labels: Vec<EmotionLabel> = full.iter().map(|p| p.label).collect();
            b.classification.push(ClassificationEntry {
                source: human.clone(),
                paradigm: None,
                report: classification_report(&labels, &gold_of(&full))?,
            });
        }
        let with_variants: Vec<VariantTriple<'_>> = full
            .iter()
            .filter_map(|f| {
                let only = idx.pred(human, None, InputVariant::TopKOnly, &f.sample_id)?;
                let removed = idx.pred(human, None, InputVariant::TopKRemoved, &f.sample_id)?;
                Some(VariantTriple { full: f, topk_only: only, topk_removed: removed })
            })
            .collect();
        if !with_variants.is_empty() {
            let row = faithfulness_row(human, None, &with_variants)?;
            b.faithfulness_pre.push(row.clone());
            b.faithfulness_post.push(row);
        }
        let eval_ids: BTreeSet<&str> = eval.iter().map(|s| s.id.as_str()).collect();
        let human_source = AgreementSource {
            name: human.clone(),
            explanations: a
                .explanations
                .iter()
                .filter(|e| e.source == *human && eval_ids.contains(e.sample_id.as_str()))
                .map(|e| (e.sample_id.clone(), e.words.clone()))
                .collect(),
            labels: full.iter().map(|p| (p.sample_id.clone(), p.label)).collect(),
        };
        for &paradigm in &a.meta.paradigms {
            agreement_sources.entry(paradigm).or_default().push(human_source.clone());
        }
    }

    for &paradigm in &a.meta.paradigms {
        if let Some(sources) = agreement_sources.get(&paradigm) {
            b.agreement.push(AgreementEntry { paradigm, matrix: pairwise_agreement(sources, a.meta.k) });
        }
    }
    Ok(b)
}
