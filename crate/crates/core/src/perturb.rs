//! Persian-aware text normalization, influential-word validation and
//! construction of the top-k-only / top-k-removed input variants.
//!
//! Tokenization is deliberately shallow: tokens are whitespace-delimited and
//! compared after stripping leading/trailing punctuation. ZWNJ (U+200C) is
//! not whitespace, so ZWNJ-joined compounds stay single tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Placeholder used for masked words in Persian payloads.
pub const DEFAULT_PLACEHOLDER: &str = "[حذف شده]";

pub const ZWNJ: char = '\u{200C}';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("placeholder '{placeholder}' collides with masked word '{word}'")]
    PlaceholderCollision { placeholder: String, word: String },
    #[error("placeholder must not be empty")]
    EmptyPlaceholder,
}

/// NFC-normalizes, collapses runs of spaces/tabs into one space, trims.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    let mut pending_space = false;
    for c in nfc.chars() {
        if c == ' ' || c == '\t' {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    // Trailing spaces were never emitted; strip any other edge whitespace.
    out.trim().to_string()
}

/// Punctuation stripped from token edges before comparison.
pub fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{060C}' // Arabic comma
                | '\u{061B}' // Arabic semicolon
                | '\u{061F}' // Arabic question mark
                | '\u{06D4}'
                | '\u{066B}'
                | '\u{066C}'
                | '«'
                | '»'
                | '…'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '¡'
                | '¿'
        )
}

/// A whitespace-delimited token with byte offsets into its source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    /// Span with edge punctuation removed; empty when the token is all punctuation.
    pub core_start: usize,
    pub core_end: usize,
}

impl Token {
    pub fn raw<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }

    pub fn core<'a>(&self, text: &'a str) -> &'a str {
        &text[self.core_start..self.core_end]
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(make_token(text, s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    tokens
}

fn make_token(text: &str, start: usize, end: usize) -> Token {
    let raw = &text[start..end];
    let lead = raw.len() - raw.trim_start_matches(is_edge_punct).len();
    let core = raw.trim_start_matches(is_edge_punct).trim_end_matches(is_edge_punct);
    Token { start, end, core_start: start + lead, core_end: start + lead + core.len() }
}

/// Punctuation-stripped token strings, in order, skipping empty ones.
pub fn word_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .iter()
        .map(|t| t.core(text))
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Equals the punctuation-stripped form of at least one token.
    Token,
    /// No token match, but occurs as a substring.
    Substring,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordMatch {
    pub word: String,
    pub kind: MatchKind,
    /// Token indices for token matches, byte offsets for substring matches.
    pub positions: Vec<usize>,
}

impl WordMatch {
    pub fn matched(&self) -> bool {
        self.kind != MatchKind::None
    }

    pub fn fallback(&self) -> bool {
        self.kind == MatchKind::Substring
    }

    pub fn occurrences(&self) -> usize {
        self.positions.len()
    }
}

/// Checks each word against the tokens of `text`. Both inputs should already be
/// normalized.
pub fn validate_words_in_text(words: &[String], text: &str) -> Vec<WordMatch> {
    let tokens = tokenize(text);
    words.iter().map(|w| match_word(w, text, &tokens)).collect()
}

fn match_word(word: &str, text: &str, tokens: &[Token]) -> WordMatch {
    if word.is_empty() {
        return WordMatch { word: String::new(), kind: MatchKind::None, positions: vec![] };
    }
    let token_hits: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.core(text) == word)
        .map(|(i, _)| i)
        .collect();
    if !token_hits.is_empty() {
        return WordMatch { word: word.to_string(), kind: MatchKind::Token, positions: token_hits };
    }
    let substring_hits: Vec<usize> = text.match_indices(word).map(|(i, _)| i).collect();
    let kind = if substring_hits.is_empty() { MatchKind::None } else { MatchKind::Substring };
    WordMatch { word: word.to_string(), kind, positions: substring_hits }
}

/// Audit record of one masking operation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub sample_id: String,
    /// Replacement count per matched word.
    pub replaced: BTreeMap<String, usize>,
    pub fallback_used: bool,
    pub unmatched: Vec<String>,
}

impl MaskingReport {
    pub fn is_clean(&self) -> bool {
        self.unmatched.is_empty()
    }
}

enum Segment {
    Text(String),
    Hole,
}

/// Replaces every occurrence of each word with `placeholder`.
///
/// Token-level matches are replaced first, keeping edge punctuation around the
/// placeholder. Words with no token match fall back to substring replacement,
/// longest word first. The returned text is re-normalized. The report's
/// `sample_id` is left empty for the caller to fill.
pub fn mask_topk(
    text: &str,
    words: &[String],
    placeholder: &str,
) -> Result<(String, MaskingReport), PerturbError> {
    if placeholder.is_empty() {
        return Err(PerturbError::EmptyPlaceholder);
    }
    let mut distinct: Vec<&str> = Vec::new();
    for w in words {
        if !w.is_empty() && !distinct.contains(&w.as_str()) {
            distinct.push(w);
        }
    }
    let placeholder_cores = word_tokens(placeholder);
    for w in &distinct {
        if *w == placeholder || placeholder_cores.iter().any(|c| c == w) {
            return Err(PerturbError::PlaceholderCollision {
                placeholder: placeholder.to_string(),
                word: w.to_string(),
            });
        }
    }
    // Longest first; stable so equal lengths keep explanation order.
    distinct.sort_by_key(|w| std::cmp::Reverse(w.chars().count()));

    let mut report = MaskingReport::default();
    let tokens = tokenize(text);

    let mut segments = Vec::new();
    let mut cursor = 0;
    for t in &tokens {
        let core = t.core(text);
        if core.is_empty() || !distinct.contains(&core) {
            continue;
        }
        *report.replaced.entry(core.to_string()).or_insert(0) += 1;
        segments.push(Segment::Text(text[cursor..t.core_start].to_string()));
        segments.push(Segment::Hole);
        cursor = t.core_end;
    }
    segments.push(Segment::Text(text[cursor..].to_string()));

    for w in &distinct {
        if report.replaced.contains_key(*w) {
            continue;
        }
        let mut count = 0;
        let mut next = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                Segment::Hole => next.push(Segment::Hole),
                Segment::Text(s) => {
                    let mut rest = s.as_str();
                    while let Some(pos) = rest.find(*w) {
                        next.push(Segment::Text(rest[..pos].to_string()));
                        next.push(Segment::Hole);
                        rest = &rest[pos + w.len()..];
                        count += 1;
                    }
                    next.push(Segment::Text(rest.to_string()));
                }
            }
        }
        segments = next;
        if count > 0 {
            report.fallback_used = true;
            report.replaced.insert(w.to_string(), count);
        } else {
            report.unmatched.push(w.to_string());
        }
    }

    let mut out = String::with_capacity(text.len());
    for seg in &segments {
        match seg {
            Segment::Text(s) => out.push_str(s),
            Segment::Hole => out.push_str(placeholder),
        }
    }
    // Keep unmatched in explanation order for readability.
    report.unmatched.sort_by_key(|u| words.iter().position(|w| w == u));
    Ok((normalize_text(&out), report))
}

/// Payload for the top-k-only variant: the words joined by ", ".
pub fn topk_only_payload(words: &[String]) -> String {
    words.join(", ")
}
