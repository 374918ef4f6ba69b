use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::domain::{EmotionLabel, Sample, Split};

/// Loaded samples plus how many rows were dropped for an out-of-scheme label.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub skipped: usize,
}

#[derive(Deserialize)]
struct JsonRow {
    id: serde_json::Value,
    text: String,
    label: serde_json::Value,
}

fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// `None` when the label is outside the six-class scheme (e.g. an "Other" class).
fn scheme_label(raw: &str) -> Option<EmotionLabel> {
    raw.trim().parse::<i64>().ok().and_then(|c| EmotionLabel::from_code(c).ok())
}

/// Reads a JSONL (`{"id","text","label"}`) or CSV (`id,text,label`) corpus.
/// Rows labeled outside 0..=5 are skipped and counted.
pub fn load_corpus(path: &Path) -> Result<Corpus, PipelineError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let rows = if is_csv { read_csv(path)? } else { read_jsonl(path)? };

    let mut seen = BTreeSet::new();
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (line, id, text, label) in rows {
        if !seen.insert(id.clone()) {
            return Err(PipelineError::DuplicateId(id));
        }
        let Some(gold) = scheme_label(&label) else {
            skipped += 1;
            continue;
        };
        let sample = Sample::new(id, &text, gold).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(Corpus { samples, skipped })
}

type RawRow = (usize, String, String, String);

fn read_jsonl(path: &Path) -> Result<Vec<RawRow>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| PipelineError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let row: JsonRow = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = id_string(&row.id).ok_or_else(|| parse_err("id must be a string or number".into()))?;
        let label = match &row.label {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            _ => return Err(parse_err("label must be an integer".into())),
        };
        rows.push((i + 1, id, row.text, label));
    }
    Ok(rows)
}

fn read_csv(path: &Path) -> Result<Vec<RawRow>, PipelineError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(PipelineError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 3 columns (id,text,label), got {}", record.len()),
            });
        }
        rows.push((line, record[0].to_string(), record[1].to_string(), record[2].to_string()));
    }
    Ok(rows)
}

/// Sample ids per split, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub evaluation: Vec<String>,
    pub calibration: Vec<String>,
}

/// Class-balanced disjoint evaluation and calibration sets. Within each class
/// (ids sorted), a seeded shuffle picks `eval_per_class` evaluation samples and
/// the next `calib_per_class` calibration samples. Returned samples carry
/// their split and are sorted by id.
pub fn balanced_split(
    samples: &[Sample],
    eval_per_class: usize,
    calib_per_class: usize,
    seed: u64,
) -> Result<(Vec<Sample>, SplitResult), PipelineError> {
    let mut by_class: BTreeMap<EmotionLabel, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.gold).or_default().push(s);
    }
    let required = eval_per_class + calib_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(required * EmotionLabel::ALL.len());
    for label in EmotionLabel::ALL {
        let mut members = by_class.remove(&label).unwrap_or_default();
        if members.len() < required {
            return Err(PipelineError::InsufficientClassCount { label, available: members.len(), required });
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        for (i, s) in members.into_iter().take(required).enumerate() {
            let split = if i < eval_per_class { Split::Evaluation } else { Split::Calibration };
            out.push(s.clone().with_split(split));
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    let ids = |split| out.iter().filter(|s| s.split == Some(split)).map(|s| s.id.clone()).collect();
    let result = SplitResult { seed, evaluation: ids(Split::Evaluation), calibration: ids(Split::Calibration) };
    Ok((out, result))
}
