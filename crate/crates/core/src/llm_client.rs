//! Text generation over an OpenAI-compatible chat-completions endpoint, with
//! a deterministic mock, a persistent response cache, a request-rate limiter
//! and a cost ledger.
//!
//! # Wire format
//!
//! Request (`POST {LLM_ENDPOINT}/chat/completions`, bearer auth when
//! `LLM_API_KEY` is set):
//!
//! ```json
//! {"model": "gpt-3.5-turbo", "messages": [{"role": "user", "content": "..."}],
//!  "temperature": 0.0, "max_tokens": 256, "stop": ["\n\n"]}
//! ```
//!
//! Response fields read: `choices[0].message.content` (or `choices[0].text`)
//! and, when present, `usage.prompt_tokens` / `usage.completion_tokens`.
//!
//! # Cache file
//!
//! Line 1 is the header `{"ftrank_cache":1}`. Every other line is one JSON
//! object `{"key", "text", "prompt_tokens", "completion_tokens",
//! "tokens_estimated"}` appended with a single write. A torn final line is
//! skipped on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::estimate_tokens;
use crate::rng;

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint unreachable after {attempts} attempts: {last}")]
    EndpointUnreachable { attempts: u32, last: String },
    #[error("prompt exceeds the model context: {0}")]
    ContextTooLong(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    BadResponse(String),
    #[error("client configuration: {0}")]
    Config(String),
    #[error("cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

/// Side information for the mock backend. Not part of the cache key and
/// never sent over the wire.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockHints {
    pub sample_id: String,
    /// `(letter, label)` pairs of a multiple-choice prompt.
    pub choice_map: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRequest {
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub stop: Option<Vec<String>>,
    pub model_id: String,
    pub hints: Option<MockHints>,
}

#[derive(Serialize)]
struct KeyFields<'a> {
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_output_tokens: u32,
    stop: &'a Option<Vec<String>>,
}

impl GenRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_output_tokens: 256,
            temperature: 0.0,
            stop: None,
            model_id: model_id.into(),
            hints: None,
        }
    }

    pub fn with_hints(mut self, hints: MockHints) -> Self {
        self.hints = Some(hints);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_output_tokens < 1 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the generation-relevant fields.
    pub fn cache_key(&self) -> String {
        let fields = KeyFields {
            model_id: &self.model_id,
            prompt: &self.prompt,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            stop: &self.stop,
        };
        let bytes = serde_json::to_vec(&fields).expect("key fields serialize");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Token counts are `ceil(bytes / 4)` estimates, not endpoint-reported.
    pub tokens_estimated: bool,
    pub latency_ms: u64,
    pub cached: bool,
}

/// Raw reply from a backend, before caching and accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

#[derive(Debug)]
pub enum BackendError {
    /// Worth retrying: connection failures, timeouts, 429, 5xx.
    Transient(String),
    Fatal(LlmError),
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &GenRequest) -> std::result::Result<BackendReply, BackendError>;
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

/// Snapshot of the call counters.
///
/// `total_calls` counts every `generate` call; backend calls are
/// `total_calls - cached_hits`. Token totals cover backend calls only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub total_calls: u64,
    pub cached_hits: u64,
    pub failed_calls: u64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub wall_ms: u64,
}

impl CostLedger {
    pub fn backend_calls(&self) -> u64 {
        self.total_calls - self.cached_hits
    }

    /// Counter growth since an earlier snapshot of the same client.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            total_calls: self.total_calls - earlier.total_calls,
            cached_hits: self.cached_hits - earlier.cached_hits,
            failed_calls: self.failed_calls - earlier.failed_calls,
            total_prompt_tokens: self.total_prompt_tokens - earlier.total_prompt_tokens,
            total_completion_tokens: self.total_completion_tokens - earlier.total_completion_tokens,
            wall_ms: self.wall_ms - earlier.wall_ms,
        }
    }
}

#[derive(Debug, Default)]
struct Ledger {
    total_calls: AtomicU64,
    cached_hits: AtomicU64,
    failed_calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    wall_ms: AtomicU64,
}

impl Ledger {
    fn snapshot(&self) -> CostLedger {
        CostLedger {
            total_calls: self.total_calls.load(Ordering::SeqCst),
            cached_hits: self.cached_hits.load(Ordering::SeqCst),
            failed_calls: self.failed_calls.load(Ordering::SeqCst),
            total_prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            total_completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
            wall_ms: self.wall_ms.load(Ordering::SeqCst),
        }
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    text: String,
    prompt_tokens: u64,
    completion_tokens: u64,
    tokens_estimated: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    ftrank_cache: u32,
}

/// In-memory response cache, optionally backed by an append-only file.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, CacheLine>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a cache file and loads its entries.
    pub fn open(path: &Path) -> Result<Self> {
        let err = |reason: String| LlmError::Cache {
            path: path.to_path_buf(),
            reason,
        };
        let mut entries = HashMap::new();
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        if exists {
            let f = File::open(path).map_err(|e| err(e.to_string()))?;
            let mut lines = BufReader::new(f).lines();
            let header = lines
                .next()
                .transpose()
                .map_err(|e| err(e.to_string()))?
                .unwrap_or_default();
            match serde_json::from_str::<CacheHeader>(&header) {
                Ok(h) if h.ftrank_cache == CACHE_VERSION => {}
                Ok(h) => return Err(err(format!("unsupported cache version {}", h.ftrank_cache))),
                Err(_) => return Err(err("missing cache header".into())),
            }
            for line in lines {
                let line = line.map_err(|e| err(e.to_string()))?;
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) => {
                        entries.insert(c.key.clone(), c);
                    }
                    Err(e) => log::warn!("skipping unreadable cache line in {}: {e}", path.display()),
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        if !exists {
            let header = serde_json::to_string(&CacheHeader {
                ftrank_cache: CACHE_VERSION,
            })
            .expect("header serializes");
            file.write_all(format!("{header}\n").as_bytes())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<CacheLine> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    fn put(&self, line: CacheLine) -> Result<()> {
        if let Some((path, file)) = &self.file {
            let mut text = serde_json::to_string(&line).expect("cache line serializes");
            text.push('\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(text.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| LlmError::Cache {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(line.key.clone(), line);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rate limiting and retries
// ---------------------------------------------------------------------------

/// Token bucket over requests per minute.
#[derive(Debug)]
pub struct RateLimiter {
    per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Self {
        let capacity = f64::from(rpm.max(1)).min(4.0);
        Self {
            per_sec: f64::from(rpm.max(1)) / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("limiter lock");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_sec).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Shareable generation client. All methods take `&self`.
pub struct LlmClient {
    backend: Box<dyn Backend>,
    cache: ResponseCache,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    ledger: Ledger,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("cache_entries", &self.cache.len())
            .field("retry", &self.retry)
            .field("ledger", &self.ledger.snapshot())
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self {
            backend: Box::new(backend),
            cache: ResponseCache::in_memory(),
            limiter: None,
            retry: RetryPolicy::default(),
            ledger: Ledger::default(),
            pool: build_pool(4),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    /// Requests per minute; `0` disables limiting.
    pub fn with_rate_limit(mut self, rpm: u32) -> Self {
        self.limiter = (rpm > 0).then(|| RateLimiter::per_minute(rpm));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.pool = build_pool(n);
        self
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.snapshot()
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenResult> {
        req.validate()?;
        self.ledger.total_calls.fetch_add(1, Ordering::SeqCst);
        let key = req.cache_key();
        if let Some(hit) = self.cache.get(&key) {
            self.ledger.cached_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(GenResult {
                text: hit.text,
                prompt_tokens: hit.prompt_tokens,
                completion_tokens: hit.completion_tokens,
                tokens_estimated: hit.tokens_estimated,
                latency_ms: 0,
                cached: true,
            });
        }
        let reply = match self.call_with_retries(req) {
            Ok(r) => r,
            Err(e) => {
                self.ledger.failed_calls.fetch_add(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let tokens_estimated = reply.prompt_tokens.is_none() || reply.completion_tokens.is_none();
        let prompt_tokens = reply
            .prompt_tokens
            .unwrap_or_else(|| estimate_tokens(&req.prompt) as u64);
        let completion_tokens = reply
            .completion_tokens
            .unwrap_or_else(|| estimate_tokens(&reply.text) as u64);
        self.ledger.prompt_tokens.fetch_add(prompt_tokens, Ordering::SeqCst);
        self.ledger
            .completion_tokens
            .fetch_add(completion_tokens, Ordering::SeqCst);
        self.ledger.wall_ms.fetch_add(reply.latency_ms, Ordering::SeqCst);
        self.cache.put(CacheLine {
            key,
            text: reply.text.clone(),
            prompt_tokens,
            completion_tokens,
            tokens_estimated,
        })?;
        Ok(GenResult {
            text: reply.text,
            prompt_tokens,
            completion_tokens,
            tokens_estimated,
            latency_ms: reply.latency_ms,
            cached: false,
        })
    }

    fn call_with_retries(&self, req: &GenRequest) -> Result<BackendReply> {
        let mut attempt = 0;
        loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.backend.complete(req) {
                Ok(r) => return Ok(r),
                Err(BackendError::Fatal(e)) => return Err(e),
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(LlmError::EndpointUnreachable {
                            attempts: attempt + 1,
                            last: msg,
                        });
                    }
                    log::debug!("transient failure ({msg}), retry {}", attempt + 1);
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }

    /// Applies `f` to every item on the client's bounded worker pool.
    /// Output order matches input order.
    pub fn map_parallel<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        use rayon::prelude::*;
        self.pool.install(|| items.par_iter().map(&f).collect())
    }
}

fn build_pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .expect("thread pool")
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: &'a Option<Vec<String>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ChatReplyMessage>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    /// `endpoint` is a base URL (`https://host/v1`) or the full
    /// `.../chat/completions` URL.
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let endpoint = endpoint.trim_end_matches('/');
        if endpoint.is_empty() {
            return Err(LlmError::Config("empty endpoint".into()));
        }
        let url = if endpoint.ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            format!("{endpoint}/chat/completions")
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { url, api_key, http })
    }

    /// Reads `LLM_ENDPOINT` (required) and `LLM_API_KEY` (optional).
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let endpoint = std::env::var("LLM_ENDPOINT")
            .map_err(|_| LlmError::Config("LLM_ENDPOINT is not set".into()))?;
        let key = std::env::var("LLM_API_KEY").ok().filter(|k| !k.is_empty());
        Self::new(&endpoint, key, timeout)
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn is_context_error(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    b.contains("context_length") || b.contains("context length") || b.contains("maximum context")
}

impl Backend for HttpBackend {
    fn complete(&self, req: &GenRequest) -> std::result::Result<BackendReply, BackendError> {
        let body = ChatRequest {
            model: &req.model_id,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
            stop: &req.stop,
        };
        let start = Instant::now();
        let mut rb = self.http.post(&self.url).json(&body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Fatal(LlmError::AuthFailure(text))),
            429 | 500..=599 => return Err(BackendError::Transient(format!("HTTP {status}: {text}"))),
            400 | 413 if is_context_error(&text) => {
                return Err(BackendError::Fatal(LlmError::ContextTooLong(text)))
            }
            _ => return Err(BackendError::Fatal(LlmError::Http { status, body: text })),
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(LlmError::BadResponse(e.to_string())))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Fatal(LlmError::BadResponse("no choices".into())))?;
        let content = choice
            .message
            .and_then(|m| m.content)
            .or(choice.text)
            .ok_or_else(|| BackendError::Fatal(LlmError::BadResponse("choice has no content".into())))?;
        Ok(BackendReply {
            text: content,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MockPolicy {
    /// Answers the gold label's letter, else `None`'s letter, else `(a)`.
    Oracle { gold: HashMap<String, String> },
    /// Always `Answer: (a)`.
    FirstChoice,
    FixedText(String),
    /// Oracle with probability `p`, else a uniformly drawn wrong choice.
    Noisy {
        gold: HashMap<String, String>,
        p: f64,
        seed: u64,
    },
    /// Canned reply per sample id; unknown ids get an empty reply.
    Scripted(HashMap<String, String>),
}

/// Deterministic stand-in for an LLM endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MockLlm {
    policy: MockPolicy,
    latency_ms: u64,
}

impl MockLlm {
    pub fn new(policy: MockPolicy) -> Result<Self> {
        if let MockPolicy::Noisy { p, .. } = &policy {
            if !(0.0..=1.0).contains(p) {
                return Err(LlmError::Config(format!("noisy mock p={p} outside [0, 1]")));
            }
        }
        Ok(Self {
            policy,
            latency_ms: 0,
        })
    }

    /// Fixed latency reported for every reply.
    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    fn oracle_letter(gold: &HashMap<String, String>, hints: &MockHints) -> String {
        let find = |label: &str| {
            hints
                .choice_map
                .iter()
                .find(|(_, l)| l == label)
                .map(|(c, _)| c.clone())
        };
        gold.get(&hints.sample_id)
            .and_then(|g| find(g))
            .or_else(|| find(crate::corpus::NONE_LABEL))
            .unwrap_or_else(|| "a".to_string())
    }

    pub fn reply(&self, req: &GenRequest) -> String {
        let empty = MockHints::default();
        let hints = req.hints.as_ref().unwrap_or(&empty);
        match &self.policy {
            MockPolicy::FirstChoice => "Answer: (a)".to_string(),
            MockPolicy::FixedText(s) => s.clone(),
            MockPolicy::Scripted(map) => map.get(&hints.sample_id).cloned().unwrap_or_default(),
            MockPolicy::Oracle { gold } => format!("Answer: ({})", Self::oracle_letter(gold, hints)),
            MockPolicy::Noisy { gold, p, seed } => {
                let right = Self::oracle_letter(gold, hints);
                let stream = if hints.sample_id.is_empty() {
                    format!("noisy:{}", req.prompt)
                } else {
                    format!("noisy:{}", hints.sample_id)
                };
                let mut r = rng::seeded(*seed, &stream);
                let wrong: Vec<&String> = hints
                    .choice_map
                    .iter()
                    .map(|(c, _)| c)
                    .filter(|c| **c != right)
                    .collect();
                let letter = if r.gen_bool(*p) || wrong.is_empty() {
                    right
                } else {
                    wrong[r.gen_range(0..wrong.len())].clone()
                };
                format!("Answer: ({letter})")
            }
        }
    }
}

impl Backend for MockLlm {
    fn complete(&self, req: &GenRequest) -> std::result::Result<BackendReply, BackendError> {
        Ok(BackendReply {
            text: self.reply(req),
            prompt_tokens: None,
            completion_tokens: None,
            latency_ms: self.latency_ms,
        })
    }
}
