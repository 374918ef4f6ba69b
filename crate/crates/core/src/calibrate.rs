//! Confidence recovery from token log-probabilities, expected calibration
//! error, reliability bins and temperature scaling fitted by grid search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::domain::LabelDistribution;
use crate::domain::{EmotionLabel, NUM_LABELS};

/// Probability assigned to a label token missing from the candidate list.
pub const MISSING_LABEL_FLOOR: f64 = 1e-10;

/// Bin count used when fitting the temperature.
pub const DEFAULT_FIT_BINS: usize = 10;

/// Bin count used for reliability-diagram exports.
pub const DEFAULT_DIAGRAM_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("none of the label tokens 0..5 appear among the candidates")]
    NoLabelMass,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("length mismatch: {0} confidences vs {1} outcomes")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Builds the six-way label distribution from one token's candidate map.
///
/// Only tokens exactly equal to "0".."5" count. Absent labels get
/// [`MISSING_LABEL_FLOOR`] before renormalization.
pub fn distribution_from_logprobs(
    candidates: &BTreeMap<String, f64>,
) -> Result<LabelDistribution, CalibrationError> {
    let mut weights = [MISSING_LABEL_FLOOR; NUM_LABELS];
    let mut found = false;
    for (i, w) in weights.iter_mut().enumerate() {
        if let Some(lp) = candidates.get(&i.to_string()) {
            *w = lp.exp();
            found = true;
        }
    }
    if !found {
        return Err(CalibrationError::NoLabelMass);
    }
    LabelDistribution::from_weights(weights).map_err(|_| CalibrationError::NoLabelMass)
}

/// `softmax(ln p / T)`. Preserves the argmax for every `T > 0`.
pub fn apply_temperature(
    dist: &LabelDistribution,
    temperature: f64,
) -> Result<LabelDistribution, CalibrationError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CalibrationError::NonPositiveTemperature(temperature));
    }
    let scaled = dist.probs().map(|p| p.ln() / temperature);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = scaled.map(|s| (s - max).exp());
    let total: f64 = exps.iter().sum();
    Ok(LabelDistribution::new(exps.map(|e| e / total)).expect("softmax output is a distribution"))
}

/// One equal-width confidence bin `[(m-1)/M, m/M)`; the last bin also holds 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    /// 1-based bin index.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean accuracy; 0 for empty bins.
    pub accuracy: f64,
    /// Mean confidence; 0 for empty bins.
    pub confidence: f64,
}

/// Zero-based bin for `confidence` under `bins` equal-width intervals.
fn bin_index(confidence: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = ((confidence * m).floor() as usize).min(bins - 1);
    // Snap to the interval definition where the product rounded across a boundary.
    while idx > 0 && confidence < idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bins && confidence >= (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

fn check_inputs(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(), CalibrationError> {
    if confidences.len() != correct.len() {
        return Err(CalibrationError::LengthMismatch(confidences.len(), correct.len()));
    }
    if confidences.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    if bins == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CalibrationError::ConfidenceOutOfRange(*c));
    }
    Ok(())
}

pub fn reliability_bins(
    confidences: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<Vec<ReliabilityBin>, CalibrationError> {
    check_inputs(confidences, correct, bins)?;
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sums = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, bins);
        counts[b] += 1;
        hits[b] += ok as usize;
        conf_sums[b] += c;
    }
    Ok((0..bins)
        .map(|b| {
            let n = counts[b];
            let (accuracy, confidence) = if n == 0 {
                (0.0, 0.0)
            } else {
                (hits[b] as f64 / n as f64, conf_sums[b] / n as f64)
            };
            ReliabilityBin {
                index: b + 1,
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                accuracy,
                confidence,
            }
        })
        .collect())
}

/// Weighted gap sum over bins, in bin order.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// Expected calibration error with `bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64, CalibrationError> {
    Ok(ece_from_bins(&reliability_bins(confidences, correct, bins)?))
}

/// Inclusive temperature grid `lo, lo+step, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self { lo: 0.1, hi: 21.0, step: 0.1 }
    }
}

impl TemperatureGrid {
    pub fn single(t: f64) -> Self {
        Self { lo: t, hi: t, step: 1.0 }
    }

    pub fn points(&self) -> Result<Vec<f64>, CalibrationError> {
        if !(self.lo > 0.0 && self.hi >= self.lo && self.step > 0.0) {
            return Err(CalibrationError::InvalidGrid(format!("{self:?}")));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        // Rounded to 12 decimals so e.g. the 10th point is exactly 1.0.
        Ok((0..=n)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

/// A fitted temperature plus fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub temperature: f64,
    pub bins: usize,
    pub grid: TemperatureGrid,
    /// ECE on the fitting set before scaling (T = 1).
    pub fit_ece_before: f64,
    /// ECE on the fitting set at the selected temperature.
    pub fit_ece_after: f64,
    pub n: usize,
}

impl CalibrationModel {
    pub fn apply(&self, dist: &LabelDistribution) -> LabelDistribution {
        apply_temperature(dist, self.temperature).expect("fitted temperature is positive")
    }
}

fn scaled_confidences(
    preds: &[(LabelDistribution, EmotionLabel)],
    temperature: f64,
) -> Result<Vec<f64>, CalibrationError> {
    preds
        .iter()
        .map(|(d, _)| {
            let label = d.argmax();
            Ok(apply_temperature(d, temperature)?.prob(label))
        })
        .collect()
}

/// Grid search for the temperature minimizing ECE; ties go to the smallest T.
pub fn fit_temperature(
    preds: &[(LabelDistribution, EmotionLabel)],
    grid: TemperatureGrid,
    bins: usize,
) -> Result<CalibrationModel, CalibrationError> {
    if preds.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let correct: Vec<bool> = preds.iter().map(|(d, gold)| d.argmax() == *gold).collect();
    let raw: Vec<f64> = preds.iter().map(|(d, _)| d.confidence()).collect();
    let fit_ece_before = ece(&raw, &correct, bins)?;

    let mut best: Option<(f64, f64)> = None;
    for t in grid.points()? {
        let e = ece(&scaled_confidences(preds, t)?, &correct, bins)?;
        if best.is_none_or(|(_, be)| e < be) {
            best = Some((t, e));
        }
    }
    let (temperature, fit_ece_after) = best.expect("grid has at least one point");
    Ok(CalibrationModel { temperature, bins, grid, fit_ece_before, fit_ece_after, n: preds.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cands(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn two_token_distribution() {
        let d = distribution_from_logprobs(&cands(&[("1", 0.7f64.ln()), ("2", 0.3f64.ln())])).unwrap();
        let total = 1.0 + 4.0 * MISSING_LABEL_FLOOR;
        assert_abs_diff_eq!(d.probs()[1], 0.7 / total, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs()[2], 0.3 / total, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs()[0], MISSING_LABEL_FLOOR / total, epsilon = 1e-20);
        assert_eq!(d.argmax(), EmotionLabel::Happiness);
    }

    #[test]
    fn equal_logprobs_are_uniform() {
        let c: BTreeMap<String, f64> = (0..6).map(|i| (i.to_string(), -2.0)).collect();
        let d = distribution_from_logprobs(&c).unwrap();
        for p in d.probs() {
            assert_abs_diff_eq!(*p, 1.0 / 6.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn non_label_tokens_ignored() {
        // 0.5 / (0.5 + 5e-10) per the floor rule.
        let d = distribution_from_logprobs(&cands(&[("1", 0.5f64.ln()), ("the", 0.5f64.ln())])).unwrap();
        assert_abs_diff_eq!(d.probs()[1], 0.5 / (0.5 + 5e-10), epsilon = 1e-15);
        assert!(matches!(
            distribution_from_logprobs(&cands(&[("a", -0.1), (" 1", -0.2)])),
            Err(CalibrationError::NoLabelMass)
        ));
    }

    #[test]
    fn temperature_identity_and_limit() {
        let d = LabelDistribution::from_weights([0.9, 0.1, 1e-10, 1e-10, 1e-10, 1e-10]).unwrap();
        let same = apply_temperature(&d, 1.0).unwrap();
        for (a, b) in d.probs().iter().zip(same.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let flat = apply_temperature(&d, 1e6).unwrap();
        for p in flat.probs() {
            assert_abs_diff_eq!(*p, 1.0 / 6.0, epsilon = 1e-4);
        }
        assert!(apply_temperature(&d, 0.0).is_err());
        assert!(apply_temperature(&d, -1.0).is_err());
    }

    #[test]
    fn temperature_two_matches_sqrt_reweighting() {
        // Independent route: softmax(ln p / 2) == sqrt(p) / sum(sqrt(p)).
        let d = LabelDistribution::from_weights([0.8, 0.2, 1e-10, 1e-10, 1e-10, 1e-10]).unwrap();
        let got = apply_temperature(&d, 2.0).unwrap();
        let roots = d.probs().map(f64::sqrt);
        let z: f64 = roots.iter().sum();
        for (g, r) in got.probs().iter().zip(roots) {
            assert_abs_diff_eq!(*g, r / z, epsilon = 1e-14);
        }
        // sqrt(0.8)/(sqrt(0.8)+sqrt(0.2)+4e-5) to leading order.
        assert_abs_diff_eq!(got.probs()[0], 2.0 / 3.0, epsilon = 1e-4);
    }

    #[test]
    fn ece_single_bin() {
        assert_eq!(ece(&[1.0, 1.0], &[true, false], 1).unwrap(), 0.5);
    }

    #[test]
    fn ece_two_bins() {
        let conf = [0.95, 0.95, 0.55, 0.55];
        let correct = [true, false, true, false];
        assert_abs_diff_eq!(ece(&conf, &correct, 2).unwrap(), 0.25, epsilon = 1e-15);
        let bins = reliability_bins(&conf, &correct, 2).unwrap();
        assert_eq!((bins[0].count, bins[1].count), (0, 4));
        assert_abs_diff_eq!(bins[1].accuracy, 0.5);
        assert_abs_diff_eq!(bins[1].confidence, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn ece_two_bins_with_split_across_half() {
        let conf = [0.95, 0.95, 0.45, 0.45];
        let correct = [true, false, true, false];
        // 0.5*|0.5-0.95| + 0.5*|0.5-0.45|
        assert_abs_diff_eq!(ece(&conf, &correct, 2).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn one_lands_in_last_bin() {
        let bins = reliability_bins(&[1.0], &[true], 20).unwrap();
        assert_eq!(bins.len(), 20);
        assert!(bins[..19].iter().all(|b| b.count == 0));
        assert_eq!(bins[19].count, 1);
        assert_eq!(bins[19].index, 20);
    }

    #[test]
    fn bin_boundaries_follow_interval_definition() {
        for m in 1..=30usize {
            for b in 0..m {
                let lower = b as f64 / m as f64;
                assert_eq!(bin_index(lower, m), b, "lower edge {b}/{m}");
            }
        }
    }

    #[test]
    fn ece_errors() {
        assert_eq!(ece(&[], &[], 10), Err(CalibrationError::EmptyInput));
        assert_eq!(ece(&[0.5], &[], 10), Err(CalibrationError::LengthMismatch(1, 0)));
        assert_eq!(ece(&[0.5], &[true], 0), Err(CalibrationError::ZeroBins));
        assert!(reliability_bins(&[], &[], 20).is_err());
    }

    #[test]
    fn grid_points() {
        let pts = TemperatureGrid::default().points().unwrap();
        assert_eq!(pts.len(), 210);
        assert_eq!(pts[0], 0.1);
        assert_eq!(pts[9], 1.0);
        assert_eq!(pts[209], 21.0);
        assert_eq!(TemperatureGrid::single(1.0).points().unwrap(), vec![1.0]);
    }

    #[test]
    fn degenerate_grid_returns_its_point() {
        let d = LabelDistribution::from_weights([0.99, 0.002, 0.002, 0.002, 0.002, 0.002]).unwrap();
        let preds = vec![(d, EmotionLabel::Sadness), (d, EmotionLabel::Fear)];
        let m = fit_temperature(&preds, TemperatureGrid::single(1.0), 10).unwrap();
        assert_eq!(m.temperature, 1.0);
        assert_eq!(m.fit_ece_after, m.fit_ece_before);
    }

    #[test]
    fn overconfident_set_gets_t_above_one() {
        let d = LabelDistribution::from_weights([0.99, 0.002, 0.002, 0.002, 0.002, 0.002]).unwrap();
        let preds: Vec<_> = (0..20)
            .map(|i| (d, if i % 2 == 0 { EmotionLabel::Sadness } else { EmotionLabel::Anger }))
            .collect();
        let m = fit_temperature(&preds, TemperatureGrid::default(), 10).unwrap();
        assert!(m.temperature > 1.0);
        assert!(m.fit_ece_after < m.fit_ece_before);
    }

    #[test]
    fn fit_requires_data() {
        assert_eq!(
            fit_temperature(&[], TemperatureGrid::default(), 10),
            Err(CalibrationError::EmptyInput)
        );
    }
}
