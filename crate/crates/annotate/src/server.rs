use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use faithscope_core::domain::{InputVariant, Sample};
use faithscope_core::perturb::{normalize_text, validate_words_in_text, MatchKind, DEFAULT_PLACEHOLDER};
use faithscope_core::pipeline::HumanSourceFile;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::assign::{create_assignments, Assignment, VariantWords};
use crate::export::{export_human_source, Coverage};
use crate::store::AnnotationStore;
use crate::{AnnotateError, AnnotationRecord, Stage, Submission};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub annotators: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub placeholder: String,
    /// Build stage-2 variants from these words instead of stage-1 selections.
    pub fixed_words: Option<BTreeMap<String, Vec<String>>>,
}

impl ServiceConfig {
    pub fn new(annotators: Vec<String>, k: usize, seed: u64) -> Self {
        Self { annotators, k, seed, placeholder: DEFAULT_PLACEHOLDER.into(), fixed_words: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator_id: String,
    pub stage1_assigned: usize,
    pub stage1_done: usize,
    /// Two records (one per variant) per stage-2 sample.
    pub stage2_assigned: usize,
    pub stage2_done: usize,
    pub verified: usize,
}

/// Assignment bookkeeping and validation in front of the store.
pub struct AnnotationService {
    config: ServiceConfig,
    samples: Vec<Sample>,
    by_id: BTreeMap<String, usize>,
    store: AnnotationStore,
    stage1: Vec<Assignment>,
    stage2: RwLock<Option<Arc<Vec<Assignment>>>>,
}

impl AnnotationService {
    pub fn new(samples: Vec<Sample>, config: ServiceConfig, store: AnnotationStore) -> Result<Self, AnnotateError> {
        let stage1 = create_assignments(
            &samples,
            &config.annotators,
            Stage::One,
            config.seed,
            VariantWords::Human(&[]),
            config.k,
            &config.placeholder,
        )?;
        let by_id = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Ok(Self { config, samples, by_id, store, stage1, stage2: RwLock::new(None) })
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    fn known(&self, annotator: &str) -> Result<usize, AnnotateError> {
        self.config
            .annotators
            .iter()
            .position(|a| a == annotator)
            .ok_or_else(|| AnnotateError::UnknownAnnotator(annotator.to_string()))
    }

    /// Stage-2 assignments, built once stage 1 is complete.
    fn stage2(&self) -> Result<Arc<Vec<Assignment>>, AnnotateError> {
        if let Some(a) = self.stage2.read().expect("assignment cache poisoned").as_ref() {
            return Ok(a.clone());
        }
        let records = self.store.records();
        let words = match &self.config.fixed_words {
            Some(m) => VariantWords::Fixed(m),
            None => VariantWords::Human(&records),
        };
        let built = Arc::new(create_assignments(
            &self.samples,
            &self.config.annotators,
            Stage::Two,
            self.config.seed,
            words,
            self.config.k,
            &self.config.placeholder,
        )?);
        *self.stage2.write().expect("assignment cache poisoned") = Some(built.clone());
        Ok(built)
    }

    pub fn assignment(&self, annotator: &str, stage: Stage) -> Result<Assignment, AnnotateError> {
        let i = self.known(annotator)?;
        match stage {
            Stage::One => Ok(self.stage1[i].clone()),
            Stage::Two => Ok(self.stage2()?[i].clone()),
        }
    }

    pub fn submit(&self, mut s: Submission) -> Result<AnnotationRecord, AnnotateError> {
        let i = self.known(&s.annotator_id)?;
        let not_assigned = |s: &Submission| AnnotateError::NotAssigned {
            annotator_id: s.annotator_id.clone(),
            sample_id: s.sample_id.clone(),
            stage: s.stage.into(),
        };
        match s.stage {
            Stage::One => {
                if !matches!(s.variant, None | Some(InputVariant::FullText)) {
                    return Err(AnnotateError::InvalidRecord("stage-1 records label the full text".into()));
                }
                s.variant = None;
                if !self.stage1[i].contains(&s.sample_id) {
                    return Err(not_assigned(&s));
                }
                let text = &self.samples[self.by_id[&s.sample_id]].text;
                s.selected_words = s.selected_words.iter().map(|w| normalize_text(w)).collect();
                self.check_words(&s.selected_words, text)?;
            }
            Stage::Two => {
                if !matches!(s.variant, Some(InputVariant::TopKOnly | InputVariant::TopKRemoved)) {
                    return Err(AnnotateError::InvalidRecord("stage-2 records need variant TopKOnly or TopKRemoved".into()));
                }
                if !s.selected_words.is_empty() {
                    return Err(AnnotateError::InvalidRecord("stage-2 records carry no selected words".into()));
                }
                if !self.stage2()?[i].contains(&s.sample_id) {
                    return Err(not_assigned(&s));
                }
            }
        }
        self.store.insert(s)
    }

    fn check_words(&self, words: &[String], text: &str) -> Result<(), AnnotateError> {
        let k = self.config.k;
        if words.len() != k {
            return Err(AnnotateError::InvalidWordSelection(format!("expected {k} words, got {}", words.len())));
        }
        let mut distinct = words.to_vec();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != k {
            return Err(AnnotateError::InvalidWordSelection("words must be distinct".into()));
        }
        if let Some(m) = validate_words_in_text(words, text).into_iter().find(|m| m.kind != MatchKind::Token) {
            return Err(AnnotateError::InvalidWordSelection(format!("'{}' is not a word of the text", m.word)));
        }
        Ok(())
    }

    pub fn verify(&self, record_id: &str, verifier_id: &str) -> Result<AnnotationRecord, AnnotateError> {
        self.known(verifier_id)?;
        self.store.verify(record_id, verifier_id)
    }

    pub fn progress(&self) -> Vec<Progress> {
        let records = self.store.records();
        let stage2 = self.stage2().ok();
        self.config
            .annotators
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mine = |stage| records.iter().filter(|r| &r.annotator_id == a && r.stage == stage).count();
                Progress {
                    annotator_id: a.clone(),
                    stage1_assigned: self.stage1[i].items.len(),
                    stage1_done: mine(Stage::One),
                    stage2_assigned: stage2.as_ref().map_or(0, |s| 2 * s[i].items.len()),
                    stage2_done: mine(Stage::Two),
                    verified: records.iter().filter(|r| &r.annotator_id == a && r.verified_by.is_some()).count(),
                }
            })
            .collect()
    }

    pub fn export(&self, source: &str) -> (HumanSourceFile, Coverage) {
        export_human_source(&self.store.records(), source, self.config.k)
    }
}

struct ApiError(AnnotateError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use AnnotateError::*;
        let (status, kind) = match &self.0 {
            InsufficientSamples { .. } | InsufficientAnnotators => (StatusCode::CONFLICT, "insufficient_samples"),
            Stage1Incomplete { .. } => (StatusCode::CONFLICT, "stage1_incomplete"),
            UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "unknown_annotator"),
            NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            InvalidWordSelection(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_word_selection"),
            InvalidRecord(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_record"),
            Duplicate => (StatusCode::CONFLICT, "duplicate"),
            UnknownRecord(_) => (StatusCode::NOT_FOUND, "unknown_record"),
            SelfVerification => (StatusCode::UNPROCESSABLE_ENTITY, "self_verification"),
            AlreadyVerified(_) => (StatusCode::CONFLICT, "already_verified"),
            Io { .. } | Corrupt { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        let body = serde_json::json!({ "error": kind, "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        Self(e)
    }
}

#[derive(Deserialize)]
struct StageQuery {
    stage: Option<u8>,
}

#[derive(Deserialize)]
struct VerifyRequest {
    record_id: String,
    verifier_id: String,
}

#[derive(Serialize)]
struct ExportResponse {
    source: HumanSourceFile,
    coverage: Coverage,
}

type Shared = Arc<AnnotationService>;

async fn get_assignment(
    State(svc): State<Shared>,
    Path(annotator): Path<String>,
    Query(q): Query<StageQuery>,
) -> Result<Json<Assignment>, ApiError> {
    let stage = Stage::try_from(q.stage.unwrap_or(1)).map_err(AnnotateError::InvalidRecord)?;
    Ok(Json(svc.assignment(&annotator, stage)?))
}

async fn post_annotation(
    State(svc): State<Shared>,
    Json(s): Json<Submission>,
) -> Result<(StatusCode, Json<AnnotationRecord>), ApiError> {
    Ok((StatusCode::CREATED, Json(svc.submit(s)?)))
}

async fn post_verify(State(svc): State<Shared>, Json(v): Json<VerifyRequest>) -> Result<Json<AnnotationRecord>, ApiError> {
    Ok(Json(svc.verify(&v.record_id, &v.verifier_id)?))
}

async fn get_progress(State(svc): State<Shared>) -> Json<Vec<Progress>> {
    Json(svc.progress())
}

async fn get_export(State(svc): State<Shared>) -> Json<ExportResponse> {
    let (source, coverage) = svc.export("human");
    Json(ExportResponse { source, coverage })
}

/// The JSON API, plus static files from `static_dir` at `/` when given.
pub fn router(service: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/assignments/{annotator_id}", get(get_assignment))
        .route("/api/annotations", post(post_annotation))
        .route("/api/verify", post(post_verify))
        .route("/api/progress", get(get_progress))
        .route("/api/export", get(get_export))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(service: Shared, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service, static_dir)).await
}
