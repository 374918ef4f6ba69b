//! Shared vocabulary: emotion labels, corpus samples, prompting paradigms,
//! input variants, predictions and explanations.
//!
//! Everything here is immutable once built. Predictions that carry a label
//! distribution derive their label and confidence from it, so the two can
//! never disagree.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of emotion classes.
pub const NUM_LABELS: usize = 6;

/// Default number of influential words requested per explanation.
pub const DEFAULT_K: usize = 5;

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("label code {0} is out of range (expected 0..=5)")]
    OutOfRange(i64),
    #[error("unknown label name '{0}'")]
    UnknownName(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("sample '{0}' has empty text")]
    EmptyText(String),
}

/// The six emotion classes with their fixed numeric codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum EmotionLabel {
    Sadness = 0,
    Happiness = 1,
    Anger = 2,
    Surprise = 3,
    Hatred = 4,
    Fear = 5,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_LABELS] = [
        EmotionLabel::Sadness,
        EmotionLabel::Happiness,
        EmotionLabel::Anger,
        EmotionLabel::Surprise,
        EmotionLabel::Hatred,
        EmotionLabel::Fear,
    ];

    pub fn from_code(code: i64) -> Result<Self, DomainError> {
        usize::try_from(code)
            .ok()
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or(DomainError::OutOfRange(code))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Sadness => "Sadness",
            EmotionLabel::Happiness => "Happiness",
            EmotionLabel::Anger => "Anger",
            EmotionLabel::Surprise => "Surprise",
            EmotionLabel::Hatred => "Hatred",
            EmotionLabel::Fear => "Fear",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, DomainError> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| DomainError::UnknownName(name.to_string()))
    }
}

/// Convenience wrapper matching the operation name used across the crate.
pub fn label_from_code(code: i64) -> Result<EmotionLabel, DomainError> {
    EmotionLabel::from_code(code)
}

impl TryFrom<i64> for EmotionLabel {
    type Error = DomainError;

    fn try_from(code: i64) -> Result<Self, Self::Error> {
        Self::from_code(code)
    }
}

impl From<EmotionLabel> for i64 {
    fn from(label: EmotionLabel) -> i64 {
        label.code() as i64
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Evaluation,
}

/// One corpus instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub gold: EmotionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Sample {
    /// Builds a sample, normalizing its text. Rejects text that is blank after trimming.
    pub fn new(id: impl Into<String>, text: &str, gold: EmotionLabel) -> Result<Self, DomainError> {
        let id = id.into();
        let text = crate::perturb::normalize_text(text);
        if text.is_empty() {
            return Err(DomainError::EmptyText(id));
        }
        Ok(Self { id, text, gold, split: None })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Paradigm {
    /// Predict, then explain.
    PE,
    /// Explain, then predict.
    EP,
}

impl Paradigm {
    pub const ALL: [Paradigm; 2] = [Paradigm::PE, Paradigm::EP];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::PE => "PE",
            Paradigm::EP => "EP",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InputVariant {
    FullText,
    TopKOnly,
    TopKRemoved,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] =
        [InputVariant::FullText, InputVariant::TopKOnly, InputVariant::TopKRemoved];

    pub fn as_str(self) -> &'static str {
        match self {
            InputVariant::FullText => "FullText",
            InputVariant::TopKOnly => "TopKOnly",
            InputVariant::TopKRemoved => "TopKRemoved",
        }
    }
}

impl fmt::Display for InputVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Probability vector over the six labels, indexed by label code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution([f64; NUM_LABELS]);

impl LabelDistribution {
    pub fn new(probs: [f64; NUM_LABELS]) -> Result<Self, DomainError> {
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(DomainError::InvalidDistribution(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(DomainError::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights to sum to one.
    pub fn from_weights(weights: [f64; NUM_LABELS]) -> Result<Self, DomainError> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(DomainError::InvalidDistribution(format!("cannot normalize {weights:?}")));
        }
        Self::new(weights.map(|w| w / total))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_LABELS as f64; NUM_LABELS])
    }

    pub fn probs(&self) -> &[f64; NUM_LABELS] {
        &self.0
    }

    pub fn prob(&self, label: EmotionLabel) -> f64 {
        self.0[label.index()]
    }

    /// Most probable label; ties go to the lowest code.
    pub fn argmax(&self) -> EmotionLabel {
        let mut best = 0;
        for i in 1..NUM_LABELS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        EmotionLabel::ALL[best]
    }

    /// Probability of the argmax label.
    pub fn confidence(&self) -> f64 {
        self.0[self.argmax().index()]
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = DomainError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        let arr: [f64; NUM_LABELS] = v
            .try_into()
            .map_err(|v: Vec<f64>| DomainError::InvalidDistribution(format!("expected 6 entries, got {}", v.len())))?;
        Self::new(arr)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Vec<f64> {
        d.0.to_vec()
    }
}

/// Ordered top-k influential words from one source for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    pub source: String,
    /// `None` for human annotators, who follow no prompting order.
    pub paradigm: Option<Paradigm>,
    pub words: Vec<String>,
}

/// Where a prediction came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Model {
        request_key: String,
        /// Candidate log-probabilities of the label token.
        label_token_logprobs: BTreeMap<String, f64>,
    },
    Human {
        annotator_id: String,
    },
}

/// A model or human decision for one (sample, paradigm, input variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub source: String,
    pub paradigm: Option<Paradigm>,
    pub variant: InputVariant,
    pub label: EmotionLabel,
    pub distribution: Option<LabelDistribution>,
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Provenance>,
}

impl Prediction {
    /// A model prediction; label and confidence follow from the distribution.
    pub fn from_distribution(
        sample_id: impl Into<String>,
        source: impl Into<String>,
        paradigm: Paradigm,
        variant: InputVariant,
        distribution: LabelDistribution,
        raw: Option<Provenance>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            source: source.into(),
            paradigm: Some(paradigm),
            variant,
            label: distribution.argmax(),
            distribution: Some(distribution),
            confidence: Some(distribution.confidence()),
            raw,
        }
    }

    /// A label-only prediction, as produced by human annotators.
    pub fn label_only(
        sample_id: impl Into<String>,
        source: impl Into<String>,
        variant: InputVariant,
        label: EmotionLabel,
        raw: Option<Provenance>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            source: source.into(),
            paradigm: None,
            variant,
            label,
            distribution: None,
            confidence: None,
            raw,
        }
    }

    /// Same prediction with its distribution replaced (e.g. after temperature scaling).
    pub fn with_distribution(&self, distribution: LabelDistribution) -> Self {
        Self {
            label: distribution.argmax(),
            distribution: Some(distribution),
            confidence: Some(distribution.confidence()),
            ..self.clone()
        }
    }

    pub fn is_human(&self) -> bool {
        self.confidence.is_none()
    }
}
