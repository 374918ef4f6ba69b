use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{AnnotateError, AnnotationRecord, Submission};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum StoreEvent {
    Annotation(AnnotationRecord),
    Verification { record_id: String, verifier_id: String, timestamp: u64 },
}

#[derive(Debug, Default)]
struct Snapshot {
    records: Arc<Vec<AnnotationRecord>>,
    log: String,
}

/// Append-only JSONL event log. Writers are serialized; readers get an
/// immutable snapshot of the records.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    writer: Mutex<()>,
    snapshot: RwLock<Snapshot>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl AnnotationStore {
    /// Opens the log at `path`, replaying any existing events.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AnnotateError> {
        let path = path.into();
        let log = match std::fs::read_to_string(&path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(source) => return Err(AnnotateError::Io { path, source }),
        };
        let mut records: Vec<AnnotationRecord> = Vec::new();
        for (i, line) in log.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: StoreEvent = serde_json::from_str(line)
                .map_err(|e| AnnotateError::Corrupt { line: i + 1, message: e.to_string() })?;
            match event {
                StoreEvent::Annotation(r) => records.push(r),
                StoreEvent::Verification { record_id, verifier_id, .. } => {
                    let r = records.iter_mut().find(|r| r.id == record_id).ok_or_else(|| AnnotateError::Corrupt {
                        line: i + 1,
                        message: format!("verification of unknown record {record_id}"),
                    })?;
                    r.verified_by = Some(verifier_id);
                }
            }
        }
        Ok(Self {
            path,
            writer: Mutex::new(()),
            snapshot: RwLock::new(Snapshot { records: Arc::new(records), log }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> Arc<Vec<AnnotationRecord>> {
        self.snapshot.read().expect("store snapshot poisoned").records.clone()
    }

    /// Rewrites the log with one more line via a temp file and rename.
    fn persist(&self, log: &str) -> Result<(), AnnotateError> {
        let io = |source| AnnotateError::Io { path: self.path.clone(), source };
        let dir = self.path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(log.as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&self.path).map_err(|e| io(e.error))?;
        Ok(())
    }

    fn append(&self, event: &StoreEvent, records: Vec<AnnotationRecord>) -> Result<(), AnnotateError> {
        let mut log = self.snapshot.read().expect("store snapshot poisoned").log.clone();
        log.push_str(&serde_json::to_string(event).expect("events serialize"));
        log.push('\n');
        self.persist(&log)?;
        *self.snapshot.write().expect("store snapshot poisoned") = Snapshot { records: Arc::new(records), log };
        Ok(())
    }

    /// Stores an already-validated submission; rejects duplicates of
    /// (annotator, sample, stage, variant).
    pub fn insert(&self, s: Submission) -> Result<AnnotationRecord, AnnotateError> {
        let _guard = self.writer.lock().expect("store writer poisoned");
        let current = self.records();
        let variant = s.variant.unwrap_or(faithscope_core::domain::InputVariant::FullText);
        if current.iter().any(|r| {
            r.annotator_id == s.annotator_id && r.sample_id == s.sample_id && r.stage == s.stage && r.input_variant() == variant
        }) {
            return Err(AnnotateError::Duplicate);
        }
        let record = AnnotationRecord {
            id: format!("r{:06}", current.len() + 1),
            annotator_id: s.annotator_id,
            sample_id: s.sample_id,
            stage: s.stage,
            variant: s.variant,
            label: s.label,
            selected_words: s.selected_words,
            verified_by: None,
            timestamp: now(),
        };
        let mut records = current.as_ref().clone();
        records.push(record.clone());
        self.append(&StoreEvent::Annotation(record.clone()), records)?;
        Ok(record)
    }

    /// Marks a record as cross-checked by a different annotator.
    pub fn verify(&self, record_id: &str, verifier_id: &str) -> Result<AnnotationRecord, AnnotateError> {
        let _guard = self.writer.lock().expect("store writer poisoned");
        let mut records = self.records().as_ref().clone();
        let r = records
            .iter_mut()
            .find(|r| r.id == record_id)
            .ok_or_else(|| AnnotateError::UnknownRecord(record_id.to_string()))?;
        if r.annotator_id == verifier_id {
            return Err(AnnotateError::SelfVerification);
        }
        if r.verified_by.is_some() {
            return Err(AnnotateError::AlreadyVerified(record_id.to_string()));
        }
        r.verified_by = Some(verifier_id.to_string());
        let updated = r.clone();
        let event = StoreEvent::Verification {
            record_id: record_id.to_string(),
            verifier_id: verifier_id.to_string(),
            timestamp: now(),
        };
        self.append(&event, records)?;
        Ok(updated)
    }
}
