//! Chat-completions gateway with token log-probabilities.
//!
//! Requests go to an OpenAI-compatible endpoint (or to the offline lexicon
//! mock) through a content-addressed record/replay cache. In replay mode the
//! backend is never touched.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{EmotionLabel, NUM_LABELS};
use crate::perturb;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("replay cache has no entry for request key {key}")]
    CacheMiss { key: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock backend does not recognize the prompt")]
    UnrecognizedPrompt,
    #[error("cache I/O error at {path}: {source}")]
    CacheIo { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache entry {path}: {source}")]
    CacheCorrupt { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// One generated token with its candidate log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub token: String,
    pub logprob: f64,
    /// The chosen token plus up to N alternatives.
    pub candidates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprobs>,
    pub model_id: String,
}

impl CompletionResult {
    pub fn validate(&self) -> Result<(), GatewayError> {
        for (i, t) in self.token_logprobs.iter().enumerate() {
            if t.logprob > 0.0 || t.candidates.values().any(|lp| *lp > 0.0 || lp.is_nan()) {
                return Err(GatewayError::Protocol(format!("positive log-probability at token {i}")));
            }
            if !t.candidates.contains_key(&t.token) {
                return Err(GatewayError::Protocol(format!("token {i} missing from its candidates")));
            }
        }
        Ok(())
    }

    /// First generated token that is not pure whitespace.
    pub fn first_content_token(&self) -> Option<&TokenLogprobs> {
        self.token_logprobs.iter().find(|t| !t.token.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 64, top_logprobs: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    #[default]
    Off,
    Record,
    Replay,
    RecordOrReplay,
}

impl std::str::FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(CacheMode::Off),
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            "record_or_replay" => Ok(CacheMode::RecordOrReplay),
            other => Err(format!("unknown cache mode '{other}'")),
        }
    }
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cache_mode: CacheMode,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

impl GatewayConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            decoding: DecodingParams::default(),
            retry: RetryPolicy::default(),
            cache_mode: CacheMode::Off,
            cache_dir: None,
            max_concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.decoding.top_logprobs < NUM_LABELS as u32 {
            return Err(GatewayError::Config(format!(
                "top_logprobs must be at least {NUM_LABELS}, got {}",
                self.decoding.top_logprobs
            )));
        }
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config("max_attempts must be at least 1".into()));
        }
        if self.max_concurrency < 1 {
            return Err(GatewayError::Config("max_concurrency must be at least 1".into()));
        }
        if self.cache_mode != CacheMode::Off && self.cache_dir.is_none() {
            return Err(GatewayError::Config("cache mode requires cache_dir".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model: &'a str,
    decoding: &'a DecodingParams,
    messages: &'a [ChatMessage],
}

/// Stable SHA-256 over model id, decoding parameters and the ordered messages.
/// Endpoint and credentials do not participate.
pub fn request_key(config: &GatewayConfig, messages: &[ChatMessage]) -> String {
    let material = KeyMaterial { model: &config.model, decoding: &config.decoding, messages };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRequest {
    pub model: String,
    pub decoding: DecodingParams,
    pub messages: Vec<ChatMessage>,
}

/// On-disk cache record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: CachedRequest,
    pub response: CompletionResult,
    pub timestamp: u64,
}

/// Directory of `<key>.json` files.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(GatewayError::CacheIo { path, source }),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|source| GatewayError::CacheCorrupt { path, source })
    }

    /// Writes to a temporary file in the cache directory, then renames.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let io = |source| GatewayError::CacheIo { path: self.dir.clone(), source };
        fs::create_dir_all(&self.dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        let body = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        tmp.write_all(&body).map_err(io)?;
        tmp.persist(self.path_for(&entry.key)).map_err(|e| io(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Raw HTTP POST. Implementations must be safe to share across workers.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<HttpResponse, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<HttpResponse, String> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub label: EmotionLabel,
    pub weight: f64,
}

/// Word list driving the offline mock backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockLexicon {
    pub words: BTreeMap<String, LexiconEntry>,
}

impl MockLexicon {
    pub fn insert(&mut self, word: &str, label: EmotionLabel, weight: f64) {
        self.words.insert(perturb::normalize_text(word), LexiconEntry { label, weight });
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = fs::read(path).map_err(|source| GatewayError::CacheIo { path: path.into(), source })?;
        serde_json::from_slice(&bytes).map_err(|source| GatewayError::CacheCorrupt { path: path.into(), source })
    }

    /// Summed weight per label over every token of `text`.
    pub fn scores(&self, text: &str) -> [f64; NUM_LABELS] {
        let mut scores = [0.0; NUM_LABELS];
        for tok in perturb::word_tokens(text) {
            if let Some(e) = self.words.get(&tok) {
                scores[e.label.index()] += e.weight;
            }
        }
        scores
    }
}

enum MockRequest {
    Classify(String),
    Explain { payload: String, k: usize },
}

fn parse_mock_request(messages: &[ChatMessage]) -> Result<MockRequest, GatewayError> {
    let first = messages.first().ok_or(GatewayError::UnrecognizedPrompt)?;
    if first.role != Role::System || !first.content.starts_with("You are an emotion classifier.") {
        return Err(GatewayError::UnrecognizedPrompt);
    }
    let last = messages.last().filter(|m| m.role == Role::User).ok_or(GatewayError::UnrecognizedPrompt)?;
    let (instructions, payload) =
        last.content.split_once("Text: ").ok_or(GatewayError::UnrecognizedPrompt)?;
    if instructions.contains("most influential words") {
        let k = instructions
            .split_once("top ")
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .ok_or(GatewayError::UnrecognizedPrompt)?;
        Ok(MockRequest::Explain { payload: payload.to_string(), k })
    } else if instructions.contains("Classify the following text") {
        Ok(MockRequest::Classify(payload.to_string()))
    } else {
        Err(GatewayError::UnrecognizedPrompt)
    }
}

/// Softmax of the lexicon scores for `text`.
pub fn mock_distribution(lexicon: &MockLexicon, text: &str) -> [f64; NUM_LABELS] {
    let scores = lexicon.scores(text);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = scores.map(|s| (s - max).exp());
    let z: f64 = exps.iter().sum();
    exps.map(|e| e / z)
}

/// Top-k words the mock reports for `text`: matched lexicon words by weight
/// (then first position), padded with the longest remaining tokens.
pub fn mock_explanation(lexicon: &MockLexicon, text: &str, k: usize) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    for tok in perturb::word_tokens(text) {
        if !seen.contains(&tok) {
            seen.push(tok);
        }
    }
    let mut matched: Vec<(usize, &String, f64)> = seen
        .iter()
        .enumerate()
        .filter_map(|(pos, w)| lexicon.words.get(w).map(|e| (pos, w, e.weight)))
        .collect();
    matched.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut out: Vec<String> = matched.iter().take(k).map(|(_, w, _)| (*w).clone()).collect();
    if out.len() < k {
        let mut rest: Vec<(usize, &String)> =
            seen.iter().enumerate().filter(|(_, w)| !lexicon.words.contains_key(*w)).collect();
        rest.sort_by(|a, b| b.1.chars().count().cmp(&a.1.chars().count()).then(a.0.cmp(&b.0)));
        out.extend(rest.into_iter().take(k - out.len()).map(|(_, w)| w.clone()));
    }
    out
}

/// Deterministic offline completion. Classification requests yield a digit
/// whose candidate map is the softmax of lexicon scores over "0".."5";
/// explanation requests yield a comma-separated word list.
pub fn mock_complete(
    lexicon: &MockLexicon,
    model_id: &str,
    messages: &[ChatMessage],
) -> Result<CompletionResult, GatewayError> {
    match parse_mock_request(messages)? {
        MockRequest::Classify(payload) => {
            let probs = mock_distribution(lexicon, &payload);
            let mut best = 0;
            for i in 1..NUM_LABELS {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            let candidates: BTreeMap<String, f64> =
                probs.iter().enumerate().map(|(i, p)| (i.to_string(), p.ln())).collect();
            let token = best.to_string();
            Ok(CompletionResult {
                text: token.clone(),
                token_logprobs: vec![TokenLogprobs { logprob: candidates[&token], token, candidates }],
                model_id: model_id.to_string(),
            })
        }
        MockRequest::Explain { payload, k } => {
            let text = mock_explanation(lexicon, &payload, k).join(",");
            let candidates = BTreeMap::from([(text.clone(), 0.0)]);
            Ok(CompletionResult {
                token_logprobs: vec![TokenLogprobs { token: text.clone(), logprob: 0.0, candidates }],
                text,
                model_id: model_id.to_string(),
            })
        }
    }
}

#[derive(Clone)]
pub enum Backend {
    Http(Arc<dyn Transport>),
    Mock(Arc<MockLexicon>),
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Http(_) => f.write_str("Backend::Http"),
            Backend::Mock(l) => write!(f, "Backend::Mock({} words)", l.words.len()),
        }
    }
}

/// A configured client. Shareable across worker threads.
#[derive(Debug)]
pub struct Gateway {
    config: GatewayConfig,
    backend: Backend,
    cache: Option<ResponseCache>,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Backend) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = match config.cache_mode {
            CacheMode::Off => None,
            _ => config.cache_dir.clone().map(ResponseCache::new),
        };
        Ok(Self { config, backend, cache, backend_calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of requests that reached the backend (network or mock).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn request_key(&self, messages: &[ChatMessage]) -> String {
        request_key(&self.config, messages)
    }

    pub fn send_chat(&self, messages: &[ChatMessage]) -> Result<CompletionResult, GatewayError> {
        match messages.first() {
            None => return Err(GatewayError::InvalidRequest("message list is empty".into())),
            Some(m) if m.role != Role::System => {
                return Err(GatewayError::InvalidRequest("first message must be a system message".into()))
            }
            _ => {}
        }
        let key = self.request_key(messages);
        match (self.config.cache_mode, &self.cache) {
            (CacheMode::Replay, Some(cache)) => cache
                .get(&key)?
                .map(|e| e.response)
                .ok_or(GatewayError::CacheMiss { key }),
            (CacheMode::RecordOrReplay, Some(cache)) => match cache.get(&key)? {
                Some(e) => Ok(e.response),
                None => self.call_and_record(cache, key, messages),
            },
            (CacheMode::Record, Some(cache)) => self.call_and_record(cache, key, messages),
            _ => self.call_backend(messages),
        }
    }

    fn call_and_record(
        &self,
        cache: &ResponseCache,
        key: String,
        messages: &[ChatMessage],
    ) -> Result<CompletionResult, GatewayError> {
        let response = self.call_backend(messages)?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = CacheEntry {
            key,
            request: CachedRequest {
                model: self.config.model.clone(),
                decoding: self.config.decoding,
                messages: messages.to_vec(),
            },
            response,
            timestamp,
        };
        cache.put(&entry)?;
        Ok(entry.response)
    }

    fn call_backend(&self, messages: &[ChatMessage]) -> Result<CompletionResult, GatewayError> {
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let result = match &self.backend {
            Backend::Mock(lexicon) => mock_complete(lexicon, &self.config.model, messages)?,
            Backend::Http(transport) => self.call_http(transport.as_ref(), messages)?,
        };
        result.validate()?;
        Ok(result)
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| GatewayError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    fn call_http(&self, transport: &dyn Transport, messages: &[ChatMessage]) -> Result<CompletionResult, GatewayError> {
        let api_key = self.api_key()?;
        let body = request_body(&self.config, messages).to_string();
        let policy = self.config.retry;
        let mut last = GatewayError::Network { attempts: 0, message: "no attempt made".into() };
        for attempt in 1..=policy.max_attempts {
            match transport.post_json(&self.config.endpoint, api_key.as_deref(), &body) {
                Ok(resp) if (200..300).contains(&resp.status) => return parse_response(&resp.body),
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(GatewayError::Auth(format!("HTTP {}", resp.status)))
                }
                Ok(resp) if resp.status == 429 => last = GatewayError::RateLimited { attempts: attempt },
                Ok(resp) if resp.status >= 500 => {
                    last = GatewayError::Network { attempts: attempt, message: format!("HTTP {}", resp.status) }
                }
                Ok(resp) => return Err(GatewayError::Http { status: resp.status, body: resp.body }),
                Err(message) => last = GatewayError::Network { attempts: attempt, message },
            }
            if attempt < policy.max_attempts {
                let delay = policy.base_backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                log::warn!("chat request attempt {attempt} failed ({last}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
            }
        }
        Err(last)
    }
}

/// OpenAI-style chat-completions request body.
pub fn request_body(config: &GatewayConfig, messages: &[ChatMessage]) -> Value {
    json!({
        "model": config.model,
        "messages": messages,
        "temperature": config.decoding.temperature,
        "max_tokens": config.decoding.max_tokens,
        "logprobs": true,
        "top_logprobs": config.decoding.top_logprobs,
    })
}

/// Extracts text and per-token candidate log-probs from a chat-completions response.
pub fn parse_response(body: &str) -> Result<CompletionResult, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("invalid JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Protocol("response has no message content".into()))?
        .to_string();
    let content = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("response lacks log-probabilities".into()))?;
    if content.is_empty() && !text.is_empty() {
        return Err(GatewayError::Protocol("response lacks log-probabilities".into()));
    }
    let entry = |e: &Value| -> Result<(String, f64), GatewayError> {
        let token = e.get("token").and_then(Value::as_str);
        let lp = e.get("logprob").and_then(Value::as_f64);
        match (token, lp) {
            (Some(t), Some(lp)) => Ok((t.to_string(), lp.min(0.0))),
            _ => Err(GatewayError::Protocol(format!("malformed logprob entry {e}"))),
        }
    };
    let mut token_logprobs = Vec::with_capacity(content.len());
    for item in content {
        let (token, logprob) = entry(item)?;
        let mut candidates = BTreeMap::new();
        if let Some(top) = item.get("top_logprobs").and_then(Value::as_array) {
            for alt in top {
                let (t, lp) = entry(alt)?;
                candidates.entry(t).or_insert(lp);
            }
        }
        candidates.entry(token.clone()).or_insert(logprob);
        token_logprobs.push(TokenLogprobs { token, logprob, candidates });
    }
    let model_id = v.get("model").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok(CompletionResult { text, token_logprobs, model_id })
}
