//! Chat-completion client with per-endpoint concurrency limits, retries and a
//! scripted in-process mock backend.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tokio::time::Instant;

use crate::corpus::Category;

pub const DEFAULT_API_KEY_ENV: &str = "FORGE_API_TOKEN";
pub const REWRITE_TEMPERATURE: f64 = 0.7;
pub const JUDGE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Multimodal,
    TextOnly,
}

/// Exponential backoff with full jitter: attempt `n` sleeps a uniform draw
/// from `[0, min(cap, base * factor^(n-1))]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackoffPolicy {
    pub base_ms: u64,
    pub factor: f64,
    pub cap_ms: u64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self { base_ms: 1000, factor: 2.0, cap_ms: 30_000 }
    }
}

impl BackoffPolicy {
    pub fn none() -> Self {
        Self { base_ms: 0, factor: 2.0, cap_ms: 0 }
    }

    pub fn ceiling(&self, attempt: u32) -> Duration {
        let exp = self.base_ms as f64 * self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(exp.min(self.cap_ms as f64) as u64)
    }
}

fn default_max_concurrent() -> usize {
    8
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retry_limit() -> u32 {
    3
}
fn default_temperature() -> f64 {
    REWRITE_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub kind: EndpointKind,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    #[serde(default)]
    pub backoff: BackoffPolicy,
    /// Script for `mock:` base URLs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
}

impl EndpointConfig {
    pub fn new(base_url: &str, model_name: &str, kind: EndpointKind) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            kind,
            max_concurrent: default_max_concurrent(),
            timeout_secs: default_timeout(),
            retry_limit: default_retry_limit(),
            temperature: default_temperature(),
            max_tokens: None,
            api_key_env: None,
            requests_per_second: None,
            backoff: BackoffPolicy::default(),
            mock_script: None,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_concurrent < 1 {
            return Err(InferenceError::Config("max_concurrent must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(InferenceError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.timeout_secs <= 0.0 {
            return Err(InferenceError::Config("timeout_secs must be positive".into()));
        }
        if self.requests_per_second.is_some_and(|r| r <= 0.0) {
            return Err(InferenceError::Config("requests_per_second must be positive".into()));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { data_base64: String, media_type: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub target_kind: EndpointKind,
    /// Overrides the endpoint's temperature when set.
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// A single user message: images first, then the prompt text.
    pub fn user(prompt: impl Into<String>, images: Vec<ContentPart>, target_kind: EndpointKind) -> Self {
        let mut content = images;
        content.push(ContentPart::Text { text: prompt.into() });
        Self {
            messages: vec![ChatMessage { role: "user".into(), content }],
            target_kind,
            temperature: None,
            max_tokens: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter(|p| matches!(p, ContentPart::Image { .. }))
            .count()
    }

    /// All text parts joined by newlines; what the mock fingerprints.
    pub fn prompt_text(&self) -> String {
        let texts: Vec<&str> = self
            .messages
            .iter()
            .flat_map(|m| &m.content)
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect();
        texts.join("\n")
    }
}

/// Reads a sample's images from `root` as inline request parts. Without a
/// root, no images are attached.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MediaLoader {
    pub root: Option<PathBuf>,
}

impl MediaLoader {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn image_parts(&self, sample: &crate::Sample) -> Result<Vec<ContentPart>, String> {
        use base64::Engine;
        let Some(root) = &self.root else { return Ok(Vec::new()) };
        sample
            .image_refs()
            .map(|rel| {
                let path = root.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| format!("media {}: {e}", path.display()))?;
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
                let media_type = match ext.as_str() {
                    "jpg" | "jpeg" => "image/jpeg",
                    "gif" => "image/gif",
                    "webp" => "image/webp",
                    _ => "image/png",
                };
                Ok(ContentPart::Image {
                    data_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
                    media_type: media_type.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("undecodable response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InferenceError {
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("request failed after {attempts} attempt(s): {cause}")]
    RequestFailed { attempts: u32, cause: String },
}

/// Transport for one request attempt.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(&self, cfg: &EndpointConfig, req: &ChatRequest) -> Result<(String, Option<Usage>), BackendError>;
}

/// Stable key for scripted responses: SHA-256 of model name and prompt text.
pub fn fingerprint(model: &str, prompt_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt_text.as_bytes());
    hex::encode(h.finalize())
}

struct Pacer {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Pacer {
    async fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().expect("pacer lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

/// A configured endpoint plus its limiter. Cheap to share behind `Arc`.
pub struct Endpoint {
    cfg: EndpointConfig,
    backend: Arc<dyn ChatBackend>,
    permits: Semaphore,
    pacer: Option<Pacer>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Endpoint {
    pub fn new(cfg: EndpointConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, InferenceError> {
        cfg.validate()?;
        let pacer = cfg.requests_per_second.map(|rps| Pacer {
            interval: Duration::from_secs_f64(1.0 / rps),
            next: Mutex::new(None),
        });
        Ok(Self { permits: Semaphore::new(cfg.max_concurrent), cfg, backend, pacer })
    }

    /// Builds the backend named by `cfg.base_url`: `mock:` loads the mock
    /// script (relative to `base_dir`), anything else speaks HTTP.
    pub fn from_config(cfg: EndpointConfig, base_dir: &Path) -> Result<Self, InferenceError> {
        let backend: Arc<dyn ChatBackend> = if cfg.is_mock() {
            let script = match &cfg.mock_script {
                Some(p) => MockScript::load(&base_dir.join(p))?,
                None => MockScript::default(),
            };
            Arc::new(MockBackend::from_script(script))
        } else {
            Arc::new(OpenAiBackend::new()?)
        };
        Self::new(cfg, backend)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// First successful completion, retrying transient failures with backoff.
    /// At most `max_concurrent` attempts are in flight at once.
    pub async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, InferenceError> {
        if req.target_kind != self.cfg.kind {
            return Err(InferenceError::Config(format!(
                "request targets {:?} but endpoint `{}` is {:?}",
                req.target_kind, self.cfg.model_name, self.cfg.kind
            )));
        }
        if self.cfg.kind == EndpointKind::TextOnly && req.image_count() > 0 {
            return Err(InferenceError::Config("text-only endpoint cannot take image parts".into()));
        }

        let max_attempts = self.cfg.retry_limit + 1;
        let timeout = Duration::from_secs_f64(self.cfg.timeout_secs);
        let mut decode_failures = 0;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                if let Some(p) = &self.pacer {
                    p.wait().await;
                }
                match tokio::time::timeout(timeout, self.backend.send(&self.cfg, req)).await {
                    Ok(r) => r,
                    Err(_) => Err(BackendError::Transient(format!("timed out after {timeout:?}"))),
                }
            };
            let cause = match result {
                Ok((text, usage)) => return Ok(ChatResponse { text, usage, attempt_count: attempt }),
                Err(BackendError::Fatal(c)) => return Err(InferenceError::RequestFailed { attempts: attempt, cause: c }),
                Err(BackendError::Decode(c)) => {
                    decode_failures += 1;
                    if decode_failures > 1 {
                        return Err(InferenceError::RequestFailed { attempts: attempt, cause: c });
                    }
                    c
                }
                Err(BackendError::Transient(c)) => c,
            };
            if attempt >= max_attempts {
                return Err(InferenceError::RequestFailed { attempts: attempt, cause });
            }
            tracing::debug!(model = %self.cfg.model_name, attempt, %cause, "retrying");
            let ceiling = self.cfg.backoff.ceiling(attempt);
            if !ceiling.is_zero() {
                let jitter = rand::rng().random_range(0..=ceiling.as_millis() as u64);
                tokio::time::sleep(Duration::from_millis(jitter)).await;
            }
        }
    }
}

/// Caption data goes to a text-only model, everything else to a multimodal one.
/// First matching endpoint wins.
pub fn route(category: Category, endpoints: &[EndpointConfig]) -> Result<usize, InferenceError> {
    let want = if category == Category::Caption { EndpointKind::TextOnly } else { EndpointKind::Multimodal };
    endpoints.iter().position(|e| e.kind == want).ok_or_else(|| {
        InferenceError::Config(match want {
            EndpointKind::TextOnly => "no text-only endpoint".into(),
            EndpointKind::Multimodal => "no multimodal endpoint".into(),
        })
    })
}

/// The endpoints of a run, routed by category.
#[derive(Debug, Clone)]
pub struct EndpointSet {
    endpoints: Vec<Arc<Endpoint>>,
}

impl EndpointSet {
    pub fn new(endpoints: Vec<Arc<Endpoint>>) -> Self {
        Self { endpoints }
    }

    pub fn configs(&self) -> Vec<EndpointConfig> {
        self.endpoints.iter().map(|e| e.cfg.clone()).collect()
    }

    pub fn route(&self, category: Category) -> Result<&Arc<Endpoint>, InferenceError> {
        Ok(&self.endpoints[route(category, &self.configs())?])
    }

    /// The multimodal endpoint used for judging and scoring.
    pub fn multimodal(&self) -> Result<&Arc<Endpoint>, InferenceError> {
        self.route(Category::General)
    }
}

type Responder = dyn Fn(&str, &str) -> Option<String> + Send + Sync;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub response: String,
}

/// On-disk mock script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    /// Fingerprint → response (or a sequence served in call order, last repeating).
    pub responses: HashMap<String, ResponseSeq>,
    /// Substring rules tried in order when no fingerprint matches.
    pub rules: Vec<MockRule>,
    pub default: Option<String>,
    /// Uniform random latency in milliseconds, `[min, max]`.
    pub latency_ms: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseSeq {
    One(String),
    Many(Vec<String>),
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let bytes = std::fs::read(path)
            .map_err(|e| InferenceError::Config(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| InferenceError::Config(format!("mock script {}: {e}", path.display())))
    }
}

/// Deterministic stand-in for a chat endpoint.
///
/// Lookup order: fingerprint script, transient-failure budget, substring
/// rules, responder function, default. Anything unmatched is a fatal 404.
/// Also records how many calls are in flight, for limiter tests.
#[derive(Default)]
pub struct MockBackend {
    script: HashMap<String, Vec<String>>,
    served: Mutex<HashMap<String, usize>>,
    failures: Mutex<HashMap<String, usize>>,
    decode_failures: Mutex<HashMap<String, usize>>,
    rules: Vec<MockRule>,
    responder: Option<Box<Responder>>,
    default: Option<String>,
    latency: Option<(u64, u64)>,
    latency_rng: Mutex<Option<ChaCha8Rng>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: MockScript) -> Self {
        let mut m = MockBackend::new();
        for (fp, seq) in script.responses {
            let seq = match seq {
                ResponseSeq::One(s) => vec![s],
                ResponseSeq::Many(v) => v,
            };
            m.script.insert(fp, seq);
        }
        m.rules = script.rules;
        m.default = script.default;
        if let Some((lo, hi)) = script.latency_ms {
            m = m.with_latency_us(lo * 1000, hi * 1000, 0);
        }
        m
    }

    pub fn respond(self, model: &str, prompt: &str, text: &str) -> Self {
        self.respond_sequence(model, prompt, &[text])
    }

    /// Successive calls with this prompt get successive entries; the last repeats.
    pub fn respond_sequence(mut self, model: &str, prompt: &str, texts: &[&str]) -> Self {
        self.script.insert(fingerprint(model, prompt), texts.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn rule(mut self, contains: &str, response: &str) -> Self {
        self.rules.push(MockRule { contains: contains.into(), response: response.into() });
        self
    }

    pub fn with_responder(mut self, f: impl Fn(&str, &str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn with_default(mut self, text: &str) -> Self {
        self.default = Some(text.to_string());
        self
    }

    /// The first `n` calls with this prompt fail transiently.
    pub fn fail_first(self, model: &str, prompt: &str, n: usize) -> Self {
        self.failures.lock().expect("mock lock").insert(fingerprint(model, prompt), n);
        self
    }

    /// The first `n` calls with this prompt return an undecodable body.
    pub fn garble_first(self, model: &str, prompt: &str, n: usize) -> Self {
        self.decode_failures.lock().expect("mock lock").insert(fingerprint(model, prompt), n);
        self
    }

    pub fn with_latency_us(mut self, min_us: u64, max_us: u64, seed: u64) -> Self {
        self.latency = Some((min_us, max_us.max(min_us)));
        self.latency_rng = Mutex::new(Some(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn take_budget(map: &Mutex<HashMap<String, usize>>, fp: &str) -> bool {
        let mut map = map.lock().expect("mock lock");
        match map.get_mut(fp) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }

    fn lookup(&self, model: &str, prompt: &str, fp: &str) -> Result<String, BackendError> {
        if Self::take_budget(&self.failures, fp) {
            return Err(BackendError::Transient("scripted failure".into()));
        }
        if Self::take_budget(&self.decode_failures, fp) {
            return Err(BackendError::Decode("scripted garbage body".into()));
        }
        if let Some(seq) = self.script.get(fp) {
            let mut served = self.served.lock().expect("mock lock");
            let n = served.entry(fp.to_string()).or_default();
            let text = seq[(*n).min(seq.len() - 1)].clone();
            *n += 1;
            return Ok(text);
        }
        if let Some(rule) = self.rules.iter().find(|r| prompt.contains(&r.contains)) {
            return Ok(rule.response.clone());
        }
        if let Some(text) = self.responder.as_ref().and_then(|f| f(model, prompt)) {
            return Ok(text);
        }
        self.default
            .clone()
            .ok_or_else(|| BackendError::Fatal(format!("404: no scripted response for fingerprint {fp}")))
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn send(&self, cfg: &EndpointConfig, req: &ChatRequest) -> Result<(String, Option<Usage>), BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);

        if let Some((lo, hi)) = self.latency {
            let us = {
                let mut rng = self.latency_rng.lock().expect("mock lock");
                rng.as_mut().map_or(lo, |r| r.random_range(lo..=hi))
            };
            tokio::time::sleep(Duration::from_micros(us)).await;
        }

        let prompt = req.prompt_text();
        let fp = fingerprint(&cfg.model_name, &prompt);
        let result = self.lookup(&cfg.model_name, &prompt, &fp);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result.map(|text| (text, None))
    }
}

#[async_trait]
impl ChatBackend for Arc<MockBackend> {
    async fn send(&self, cfg: &EndpointConfig, req: &ChatRequest) -> Result<(String, Option<Usage>), BackendError> {
        self.as_ref().send(cfg, req).await
    }
}

/// OpenAI-compatible `/v1/chat/completions` over HTTP.
pub struct OpenAiBackend {
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiBackend {
    pub fn new() -> Result<Self, InferenceError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| InferenceError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }

    /// JSON body for one request.
    pub fn request_body(cfg: &EndpointConfig, req: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| {
                let has_images = m.content.iter().any(|p| matches!(p, ContentPart::Image { .. }));
                if !has_images {
                    let text: Vec<&str> = m
                        .content
                        .iter()
                        .filter_map(|p| match p {
                            ContentPart::Text { text } => Some(text.as_str()),
                            ContentPart::Image { .. } => None,
                        })
                        .collect();
                    return json!({ "role": m.role, "content": text.join("\n") });
                }
                let parts: Vec<serde_json::Value> = m
                    .content
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text { text } => json!({ "type": "text", "text": text }),
                        ContentPart::Image { data_base64, media_type } => json!({
                            "type": "image_url",
                            "image_url": { "url": format!("data:{media_type};base64,{data_base64}") }
                        }),
                    })
                    .collect();
                json!({ "role": m.role, "content": parts })
            })
            .collect();
        let mut body = json!({
            "model": cfg.model_name,
            "messages": messages,
            "temperature": req.temperature.unwrap_or(cfg.temperature),
        });
        if let Some(max) = req.max_tokens.or(cfg.max_tokens) {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn send(&self, cfg: &EndpointConfig, req: &ChatRequest) -> Result<(String, Option<Usage>), BackendError> {
        let url = format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&Self::request_body(cfg, req));
        let key_env = cfg.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        if let Ok(token) = std::env::var(key_env) {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().await.map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let snippet = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).to_string();
            return Err(BackendError::Fatal(format!("HTTP {status}: {snippet}")));
        }
        let body: CompletionBody = serde_json::from_slice(&bytes).map_err(|e| BackendError::Decode(e.to_string()))?;
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("no choices[0].message.content".into()))?;
        Ok((text, body.usage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: EndpointKind) -> EndpointConfig {
        let mut c = EndpointConfig::new("mock:", "m", kind);
        c.backoff = BackoffPolicy::none();
        c
    }

    fn endpoint(c: EndpointConfig, mock: Arc<MockBackend>) -> Endpoint {
        Endpoint::new(c, Arc::new(mock)).unwrap()
    }

    #[tokio::test]
    async fn echoes_scripted_text() {
        let mock = Arc::new(MockBackend::new().respond("m", "p1", "Yes"));
        let ep = endpoint(cfg(EndpointKind::Multimodal), mock);
        let r = ep.complete(&ChatRequest::user("p1", vec![], EndpointKind::Multimodal)).await.unwrap();
        assert_eq!((r.text.as_str(), r.attempt_count), ("Yes", 1));
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let mock = Arc::new(MockBackend::new().respond("m", "p", "ok").fail_first("m", "p", 2));
        let mut c = cfg(EndpointKind::Multimodal);
        c.retry_limit = 3;
        let ep = endpoint(c, mock.clone());
        let r = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap();
        assert_eq!(r.attempt_count, 3);
        assert_eq!(mock.calls(), 3);
    }

    #[tokio::test]
    async fn gives_up_after_retry_limit() {
        let mock = Arc::new(MockBackend::new().respond("m", "p", "ok").fail_first("m", "p", 5));
        let mut c = cfg(EndpointKind::Multimodal);
        c.retry_limit = 2;
        let err = endpoint(c, mock).complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
        assert!(matches!(err, InferenceError::RequestFailed { attempts: 3, .. }), "{err:?}");
    }

    #[tokio::test]
    async fn decode_failure_retried_once_then_fatal() {
        let mock = Arc::new(MockBackend::new().respond("m", "p", "ok").garble_first("m", "p", 1));
        let ep = endpoint(cfg(EndpointKind::Multimodal), mock);
        assert_eq!(ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap().attempt_count, 2);

        let mock = Arc::new(MockBackend::new().respond("m", "p", "ok").garble_first("m", "p", 2));
        let ep = endpoint(cfg(EndpointKind::Multimodal), mock);
        let err = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
        assert!(matches!(err, InferenceError::RequestFailed { attempts: 2, .. }));
    }

    #[tokio::test]
    async fn text_only_rejects_images_before_any_call() {
        let mock = Arc::new(MockBackend::new().with_default("x"));
        let ep = endpoint(cfg(EndpointKind::TextOnly), mock.clone());
        let img = ContentPart::Image { data_base64: "AA==".into(), media_type: "image/png".into() };
        let err = ep.complete(&ChatRequest::user("p", vec![img], EndpointKind::TextOnly)).await.unwrap_err();
        assert!(matches!(err, InferenceError::Config(_)));
        let err = ep.complete(&ChatRequest::user("p", vec![], EndpointKind::Multimodal)).await.unwrap_err();
        assert!(matches!(err, InferenceError::Config(_)));
        assert_eq!(mock.calls(), 0);
    }

    #[tokio::test]
    async fn mock_default_and_404() {
        let mock = Arc::new(MockBackend::new().with_default("No"));
        let ep = endpoint(cfg(EndpointKind::Multimodal), mock);
        let req = ChatRequest::user("anything", vec![], EndpointKind::Multimodal);
        assert_eq!(ep.complete(&req).await.unwrap().text, "No");
        assert_eq!(ep.complete(&req).await.unwrap().text, "No");

        let ep = endpoint(cfg(EndpointKind::Multimodal), Arc::new(MockBackend::new()));
        let err = ep.complete(&req).await.unwrap_err();
        assert!(err.to_string().contains("404"), "{err}");
    }

    #[tokio::test]
    async fn mock_sequences_advance() {
        let mock = Arc::new(MockBackend::new().respond_sequence("m", "p", &["maybe", "No"]));
        let ep = endpoint(cfg(EndpointKind::Multimodal), mock);
        let req = ChatRequest::user("p", vec![], EndpointKind::Multimodal);
        assert_eq!(ep.complete(&req).await.unwrap().text, "maybe");
        assert_eq!(ep.complete(&req).await.unwrap().text, "No");
        assert_eq!(ep.complete(&req).await.unwrap().text, "No");
    }

    #[tokio::test]
    async fn concurrency_bound_holds() {
        let mock = Arc::new(MockBackend::new().with_default("ok").with_latency_us(100, 2000, 9));
        let mut c = cfg(EndpointKind::Multimodal);
        c.max_concurrent = 3;
        let ep = Arc::new(endpoint(c, mock.clone()));
        let tasks: Vec<_> = (0..200)
            .map(|i| {
                let ep = ep.clone();
                tokio::spawn(async move {
                    ep.complete(&ChatRequest::user(format!("p{i}"), vec![], EndpointKind::Multimodal)).await.unwrap()
                })
            })
            .collect();
        for t in tasks {
            t.await.unwrap();
        }
        assert!(mock.max_in_flight() <= 3);
        assert!(mock.max_in_flight() >= 2, "latency should overlap requests");
    }

    #[test]
    fn routing() {
        let mm = EndpointConfig::new("http://a", "mm", EndpointKind::Multimodal);
        let text = EndpointConfig::new("http://b", "text", EndpointKind::TextOnly);
        let both = [mm.clone(), text.clone()];
        assert_eq!(route(Category::Caption, &both).unwrap(), 1);
        assert_eq!(route(Category::Ocr, &both).unwrap(), 0);
        assert_eq!(
            route(Category::Chart, &[text]).unwrap_err(),
            InferenceError::Config("no multimodal endpoint".into())
        );
    }

    #[test]
    fn config_validation() {
        let mut c = EndpointConfig::new("http://a", "m", EndpointKind::Multimodal);
        c.max_concurrent = 0;
        assert!(c.validate().is_err());
        c.max_concurrent = 1;
        c.temperature = 2.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn backoff_ceiling_caps() {
        let b = BackoffPolicy::default();
        assert_eq!(b.ceiling(1), Duration::from_secs(1));
        assert_eq!(b.ceiling(3), Duration::from_secs(4));
        assert_eq!(b.ceiling(10), Duration::from_secs(30));
    }

    #[test]
    fn wire_body_uses_data_urls() {
        let c = EndpointConfig::new("http://a", "m", EndpointKind::Multimodal);
        let img = ContentPart::Image { data_base64: "QUJD".into(), media_type: "image/png".into() };
        let body = OpenAiBackend::request_body(&c, &ChatRequest::user("hi", vec![img], EndpointKind::Multimodal).with_temperature(0.0));
        assert_eq!(body["model"], "m");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["content"][0]["image_url"]["url"], "data:image/png;base64,QUJD");
        assert_eq!(body["messages"][0]["content"][1]["text"], "hi");
        let body = OpenAiBackend::request_body(&c, &ChatRequest::user("hi", vec![], EndpointKind::Multimodal));
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["temperature"], 0.7);
    }
}
