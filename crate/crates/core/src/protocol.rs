//! Prompt templates and the multi-turn prompting flows.
//!
//! Four standalone templates cover full-text classification, top-k word
//! extraction and the two reclassification variants. The predict-then-explain
//! and explain-then-predict flows are single two-turn conversations whose
//! follow-up turns use their own wording.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::distribution_from_logprobs;
use crate::domain::{EmotionLabel, Explanation, InputVariant, Paradigm, Prediction, Provenance, Sample};
use crate::gateway::{ChatMessage, CompletionResult, Gateway, GatewayError};
use crate::perturb::{self, MaskingReport, PerturbError, DEFAULT_PLACEHOLDER};

const SYSTEM_CLASSIFY_AND_EXPLAIN: &str = "You are an emotion classifier. You must classify the emotion and output the top influential words in CSV format. For classifying, you are strictly required to output only one of the following English numbers: 0, 1, 2, 3, 4, or 5. No other output is acceptable. For top influential words, you can only output Persian words in the text.";

const SYSTEM_TOPK_ONLY: &str = "You are an emotion classifier. You are provided with some influential words that have been extracted from the text. You must classify the emotion based only on these words. For classifying, you are strictly required to output only one of the following English numbers: 0, 1, 2, 3, 4, or 5. No other output is acceptable.";

const SYSTEM_REMOVED: &str = "You are an emotion classifier. In the text, some influential words have been replaced with the placeholder {P}. You must classify the emotion based on the text, considering these {P} words as part of the context. For classifying, you are strictly required to output only one of the following English numbers: 0, 1, 2, 3, 4, or 5. No other output is acceptable.";

const USER_CLASSIFY_FULL: &str = "Classify the following text into one of the categories: 'Sadness':0, 'Happiness':1, 'Anger':2, 'Surprise':3, 'Hatred':4, 'Fear':5. For each class, output the mapped number. Only output an English number showing the class of the text. Make sure not to output any other character. Text:";

const USER_CLASSIFY_VARIANT: &str = "Classify the following text into one of the categories: 'Sadness':0, 'Happiness':1, 'Anger':2, 'Surprise':3, 'Hatred':4, 'Fear':5. For each class output the mapped number. Only output an English number showing the class of the text. Make sure not to output any other character. Text:";

const USER_EXTRACT_TOPK: &str = "List the top {K} most influential words that contributed to this classification in CSV format (in a single line). I don't want you to classify in this stage. Only give me top {K} words. Make sure to provide only {K} Persian words which they exist in the original text and don't output any other token. Here is an example output: word1,word2,word3,word4,word5 Text:";

// Follow-up and opening turns used inside the two-turn flows.
const USER_PE_EXPLAIN: &str = "Then, list the top {K} most influential words that contributed to this classification in CSV format (in a single line). Make sure to provide only {K} Persian words that exist in the original text and don't output any other token. Text:";

const USER_EP_EXPLAIN: &str = "List the top {K} most influential words that contributed to this classification in CSV format (in a single line). Make sure to provide only {K} Persian words that exist in the original text and don't output any other token. Text:";

const USER_EP_CLASSIFY: &str = "Then, Classify the following text into one of the categories: 'Sadness':0, 'Happiness':1, 'Anger':2, 'Surprise':3, 'Hatred':4, 'Fear':5. For each class, output the mapped number. Only output an English number showing the class of the text. Make sure not to output any other character. Text:";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("variant {0} cannot be built from an explanation")]
    InvalidVariant(InputVariant),
    #[error("sample '{0}' has empty text")]
    EmptyPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    ClassifyFull,
    ExtractTopK,
    ClassifyTopKOnly,
    ClassifyRemoved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub system: String,
    /// Ends with "Text:".
    pub user_prefix: String,
}

fn with_k(template: &str, k: usize) -> String {
    template.replace("{K}", &k.to_string())
}

impl PromptTemplate {
    pub fn new(id: TemplateId, k: usize, placeholder: &str) -> Self {
        let (system, user) = match id {
            TemplateId::ClassifyFull => (SYSTEM_CLASSIFY_AND_EXPLAIN.to_string(), USER_CLASSIFY_FULL),
            TemplateId::ExtractTopK => (SYSTEM_CLASSIFY_AND_EXPLAIN.to_string(), USER_EXTRACT_TOPK),
            TemplateId::ClassifyTopKOnly => (SYSTEM_TOPK_ONLY.to_string(), USER_CLASSIFY_VARIANT),
            TemplateId::ClassifyRemoved => (SYSTEM_REMOVED.replace("{P}", placeholder), USER_CLASSIFY_VARIANT),
        };
        Self { id, system, user_prefix: with_k(user, k) }
    }

    pub fn messages(&self, payload: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.system.clone()), ChatMessage::user(user_turn(&self.user_prefix, payload))]
    }
}

fn user_turn(prefix: &str, payload: &str) -> String {
    format!("{prefix} {payload}")
}

/// `[system, user]` for a standalone template, using the default placeholder.
pub fn build_prompt(template: TemplateId, payload: &str, k: usize) -> Vec<ChatMessage> {
    PromptTemplate::new(template, k, DEFAULT_PLACEHOLDER).messages(payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MalformedReason {
    NotASingleDigit,
    WrongWordCount,
    WordNotInText,
    EmptyOutput,
    /// The label token carried no candidate mass on "0".."5".
    MissingLabelLogprobs,
}

/// A model turn that failed format checks; its sample is excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedOutput {
    pub sample_id: String,
    pub source: String,
    pub paradigm: Option<Paradigm>,
    pub stage: TemplateId,
    pub raw_text: String,
    pub reason: MalformedReason,
}

/// Accepts exactly one ASCII digit 0..5 after trimming whitespace.
pub fn parse_label(text: &str) -> Result<EmotionLabel, MalformedReason> {
    let t = text.trim();
    if t.is_empty() {
        return Err(MalformedReason::EmptyOutput);
    }
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ '0'..='5'), None) => Ok(EmotionLabel::ALL[c as usize - '0' as usize]),
        _ => Err(MalformedReason::NotASingleDigit),
    }
}

/// Splits a comma-separated word list and checks it against `original_text`.
///
/// Exactly `k` non-empty words are required, each present in the text. A
/// repeated word needs at least that many occurrences.
pub fn parse_topk_csv(text: &str, original_text: &str, k: usize) -> Result<Vec<String>, MalformedReason> {
    if text.trim().is_empty() {
        return Err(MalformedReason::EmptyOutput);
    }
    let words: Vec<String> = text
        .split([',', '\u{060C}'])
        .map(perturb::normalize_text)
        .filter(|w| !w.is_empty())
        .collect();
    if words.len() != k {
        return Err(MalformedReason::WrongWordCount);
    }
    let matches = perturb::validate_words_in_text(&words, original_text);
    for (w, m) in words.iter().zip(&matches) {
        let wanted = words.iter().filter(|x| *x == w).count();
        if !m.matched() || m.occurrences() < wanted {
            return Err(MalformedReason::WordNotInText);
        }
    }
    Ok(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowKind {
    PredictThenExplain,
    ExplainThenPredict,
    TopKOnly,
    TopKRemoved,
}

/// One conversation, as sent and received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub source: String,
    pub paradigm: Paradigm,
    pub flow: FlowKind,
    pub messages: Vec<ChatMessage>,
    /// Request key of each assistant turn, in order.
    pub request_keys: Vec<String>,
}

impl Transcript {
    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == crate::gateway::Role::Assistant).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub prediction: Prediction,
    pub explanation: Explanation,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowResult {
    Complete(FlowOutput),
    Malformed { output: MalformedOutput, transcript: Transcript },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub outcome: Result<Prediction, MalformedOutput>,
    pub transcript: Transcript,
    /// Present for the top-k-removed variant.
    pub masking: Option<MaskingReport>,
}

/// Runs the prompting flows for one source.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub source: String,
    pub k: usize,
    pub placeholder: String,
}

struct Conversation<'a> {
    gateway: &'a Gateway,
    transcript: Transcript,
}

impl Conversation<'_> {
    fn ask(&mut self, user: String) -> Result<(CompletionResult, String), GatewayError> {
        self.transcript.messages.push(ChatMessage::user(user));
        let key = self.gateway.request_key(&self.transcript.messages);
        let completion = self.gateway.send_chat(&self.transcript.messages)?;
        self.transcript.messages.push(ChatMessage::assistant(completion.text.clone()));
        self.transcript.request_keys.push(key.clone());
        Ok((completion, key))
    }
}

impl Protocol {
    pub fn new(source: impl Into<String>, k: usize, placeholder: impl Into<String>) -> Self {
        Self { source: source.into(), k, placeholder: placeholder.into() }
    }

    fn conversation<'a>(
        &self,
        gateway: &'a Gateway,
        sample: &Sample,
        paradigm: Paradigm,
        flow: FlowKind,
        system: &str,
    ) -> Conversation<'a> {
        Conversation {
            gateway,
            transcript: Transcript {
                sample_id: sample.id.clone(),
                source: self.source.clone(),
                paradigm,
                flow,
                messages: vec![ChatMessage::system(system)],
                request_keys: Vec::new(),
            },
        }
    }

    fn malformed(
        &self,
        sample: &Sample,
        paradigm: Paradigm,
        stage: TemplateId,
        raw_text: &str,
        reason: MalformedReason,
    ) -> MalformedOutput {
        MalformedOutput {
            sample_id: sample.id.clone(),
            source: self.source.clone(),
            paradigm: Some(paradigm),
            stage,
            raw_text: raw_text.to_string(),
            reason,
        }
    }

    fn read_prediction(
        &self,
        sample: &Sample,
        paradigm: Paradigm,
        variant: InputVariant,
        stage: TemplateId,
        completion: &CompletionResult,
        key: String,
    ) -> Result<Prediction, MalformedOutput> {
        parse_label(&completion.text).map_err(|r| self.malformed(sample, paradigm, stage, &completion.text, r))?;
        let missing = || self.malformed(sample, paradigm, stage, &completion.text, MalformedReason::MissingLabelLogprobs);
        let token = completion.first_content_token().ok_or_else(missing)?;
        let distribution = distribution_from_logprobs(&token.candidates).map_err(|_| missing())?;
        let raw = Provenance::Model { request_key: key, label_token_logprobs: token.candidates.clone() };
        Ok(Prediction::from_distribution(&sample.id, &self.source, paradigm, variant, distribution, Some(raw)))
    }

    fn read_explanation(
        &self,
        sample: &Sample,
        paradigm: Paradigm,
        completion: &CompletionResult,
    ) -> Result<Explanation, MalformedOutput> {
        let words = parse_topk_csv(&completion.text, &sample.text, self.k)
            .map_err(|r| self.malformed(sample, paradigm, TemplateId::ExtractTopK, &completion.text, r))?;
        Ok(Explanation {
            sample_id: sample.id.clone(),
            source: self.source.clone(),
            paradigm: Some(paradigm),
            words,
        })
    }

    fn check_payload(sample: &Sample) -> Result<(), ProtocolError> {
        if sample.text.trim().is_empty() {
            return Err(ProtocolError::EmptyPayload(sample.id.clone()));
        }
        Ok(())
    }

    /// Classify the full text, then ask for the top-k words in the same conversation.
    pub fn run_pe(&self, gateway: &Gateway, sample: &Sample) -> Result<FlowResult, ProtocolError> {
        Self::check_payload(sample)?;
        let p = Paradigm::PE;
        let mut conv = self.conversation(gateway, sample, p, FlowKind::PredictThenExplain, SYSTEM_CLASSIFY_AND_EXPLAIN);

        let (completion, key) = conv.ask(user_turn(USER_CLASSIFY_FULL, &sample.text))?;
        let prediction = match self.read_prediction(sample, p, InputVariant::FullText, TemplateId::ClassifyFull, &completion, key) {
            Ok(pred) => pred,
            Err(output) => return Ok(FlowResult::Malformed { output, transcript: conv.transcript }),
        };

        let (completion, _) = conv.ask(user_turn(&with_k(USER_PE_EXPLAIN, self.k), &sample.text))?;
        match self.read_explanation(sample, p, &completion) {
            Ok(explanation) => Ok(FlowResult::Complete(FlowOutput { prediction, explanation, transcript: conv.transcript })),
            Err(output) => Ok(FlowResult::Malformed { output, transcript: conv.transcript }),
        }
    }

    /// Ask for the top-k words, then classify with the explanation turn as context.
    pub fn run_ep(&self, gateway: &Gateway, sample: &Sample) -> Result<FlowResult, ProtocolError> {
        Self::check_payload(sample)?;
        let p = Paradigm::EP;
        let mut conv = self.conversation(gateway, sample, p, FlowKind::ExplainThenPredict, SYSTEM_CLASSIFY_AND_EXPLAIN);

        let (completion, _) = conv.ask(user_turn(&with_k(USER_EP_EXPLAIN, self.k), &sample.text))?;
        let explanation = match self.read_explanation(sample, p, &completion) {
            Ok(e) => e,
            Err(output) => return Ok(FlowResult::Malformed { output, transcript: conv.transcript }),
        };

        let (completion, key) = conv.ask(user_turn(USER_EP_CLASSIFY, &sample.text))?;
        match self.read_prediction(sample, p, InputVariant::FullText, TemplateId::ClassifyFull, &completion, key) {
            Ok(prediction) => Ok(FlowResult::Complete(FlowOutput { prediction, explanation, transcript: conv.transcript })),
            Err(output) => Ok(FlowResult::Malformed { output, transcript: conv.transcript }),
        }
    }

    pub fn run(&self, gateway: &Gateway, sample: &Sample, paradigm: Paradigm) -> Result<FlowResult, ProtocolError> {
        match paradigm {
            Paradigm::PE => self.run_pe(gateway, sample),
            Paradigm::EP => self.run_ep(gateway, sample),
        }
    }

    /// Reclassify a perturbed input in a fresh conversation.
    pub fn run_variant(
        &self,
        gateway: &Gateway,
        sample: &Sample,
        explanation: &Explanation,
        variant: InputVariant,
    ) -> Result<VariantResult, ProtocolError> {
        let paradigm = explanation.paradigm.unwrap_or(Paradigm::PE);
        let (template, flow, payload, masking) = match variant {
            InputVariant::FullText => return Err(ProtocolError::InvalidVariant(variant)),
            InputVariant::TopKOnly => (
                TemplateId::ClassifyTopKOnly,
                FlowKind::TopKOnly,
                perturb::topk_only_payload(&explanation.words),
                None,
            ),
            InputVariant::TopKRemoved => {
                let (masked, mut report) = perturb::mask_topk(&sample.text, &explanation.words, &self.placeholder)?;
                report.sample_id = sample.id.clone();
                (TemplateId::ClassifyRemoved, FlowKind::TopKRemoved, masked, Some(report))
            }
        };
        if payload.trim().is_empty() {
            return Err(ProtocolError::EmptyPayload(sample.id.clone()));
        }
        let prompt = PromptTemplate::new(template, self.k, &self.placeholder);
        let mut conv = self.conversation(gateway, sample, paradigm, flow, &prompt.system);
        let (completion, key) = conv.ask(user_turn(&prompt.user_prefix, &payload))?;
        let outcome = self.read_prediction(sample, paradigm, variant, template, &completion, key);
        Ok(VariantResult { outcome, transcript: conv.transcript, masking })
    }
}
