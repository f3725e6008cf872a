//! Completion backends returning per-token log-probabilities, plus the
//! caching, throttling and retrying client the pipeline talks to.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: u32 = 200;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend rejected request: {0}")]
    BackendRejected(String),
    #[error("malformed backend response: {0}")]
    MalformedBackendResponse(String),
    #[error("tokens do not tile the generated text: {0}")]
    TokenAlignmentFailure(String),
    #[error("span {start}..{end} out of bounds for text of length {len}")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("mock backend has no response for prompt sha256 {0}")]
    UnprogrammedPrompt(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LmError {
    fn is_retryable(&self) -> bool {
        matches!(self, LmError::BackendUnavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub logprob: f64,
    /// Byte range into the response text.
    pub span: (usize, usize),
}

/// Generated text with tokens that tile it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    text: String,
    tokens: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanLogprob {
    pub sum_logprob: f64,
    pub token_count: usize,
}

/// Wire/cache form of a token: `{"t": text, "lp": logprob}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub t: String,
    pub lp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredResponse {
    text: String,
    tokens: Vec<TokenRecord>,
}

impl CompletionResponse {
    /// Validates that the tokens concatenate to `text` and carry log-probabilities `<= 0`.
    pub fn new(text: impl Into<String>, tokens: Vec<TokenRecord>) -> Result<Self, LmError> {
        let text = text.into();
        let mut out = Vec::with_capacity(tokens.len());
        let mut pos = 0;
        for tok in tokens {
            if !(tok.lp <= 0.0) {
                return Err(LmError::MalformedBackendResponse(format!(
                    "token {:?} has logprob {}",
                    tok.t, tok.lp
                )));
            }
            let end = pos + tok.t.len();
            if text.get(pos..end) != Some(tok.t.as_str()) {
                return Err(LmError::TokenAlignmentFailure(format!(
                    "token {:?} does not match text at byte {pos}",
                    tok.t
                )));
            }
            out.push(Token {
                text: tok.t,
                logprob: tok.lp,
                span: (pos, end),
            });
            pos = end;
        }
        if pos != text.len() {
            return Err(LmError::TokenAlignmentFailure(format!(
                "tokens cover {pos} of {} bytes",
                text.len()
            )));
        }
        Ok(CompletionResponse { text, tokens: out })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token_records(&self) -> Vec<TokenRecord> {
        self.tokens
            .iter()
            .map(|t| TokenRecord {
                t: t.text.clone(),
                lp: t.logprob,
            })
            .collect()
    }

    /// Sums log-probabilities over every token whose span intersects `[start, end)`.
    pub fn span_logprob(&self, span: (usize, usize)) -> Result<SpanLogprob, LmError> {
        let (start, end) = span;
        if start >= end || end > self.text.len() {
            return Err(LmError::SpanOutOfBounds {
                start,
                end,
                len: self.text.len(),
            });
        }
        let mut sum_logprob = 0.0;
        let mut token_count = 0;
        for tok in &self.tokens {
            if tok.span.0 < end && tok.span.1 > start {
                sum_logprob += tok.logprob;
                token_count += 1;
            }
        }
        Ok(SpanLogprob {
            sum_logprob,
            token_count,
        })
    }

    fn to_stored(&self) -> StoredResponse {
        StoredResponse {
            text: self.text.clone(),
            tokens: self.token_records(),
        }
    }
}

/// Something that can produce a greedy continuation with token log-probabilities.
pub trait Backend: Send + Sync {
    /// Stable identifier, part of the response cache key.
    fn id(&self) -> String;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LmError>;
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

/// One line of a mock programming file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    pub prompt_sha256: String,
    pub text: String,
    pub tokens: Vec<TokenRecord>,
}

/// Answers prompts from a table keyed by the prompt's SHA-256.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    id: String,
    responses: HashMap<String, CompletionResponse>,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> Self {
        MockBackend {
            id: id.into(),
            responses: HashMap::new(),
        }
    }

    pub fn insert(&mut self, prompt: &str, response: CompletionResponse) {
        self.responses.insert(sha256_hex(prompt), response);
    }

    pub fn insert_entry(&mut self, entry: MockEntry) -> Result<(), LmError> {
        let resp = CompletionResponse::new(entry.text, entry.tokens)?;
        self.responses.insert(entry.prompt_sha256, resp);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Loads the line-delimited mock format. The backend id embeds the file's hash.
    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref();
        let raw = std::fs::read(path)?;
        let mut mock = MockBackend::new(format!("mock:{}", &sha256_hex(&raw)[..16]));
        for (idx, line) in raw.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry =
                serde_json::from_str(&line).map_err(|source| LmError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            mock.insert_entry(entry)?;
        }
        Ok(mock)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LmError> {
        let key = sha256_hex(&req.prompt);
        self.responses
            .get(&key)
            .cloned()
            .ok_or(LmError::UnprogrammedPrompt(key))
    }
}

/// OpenAI-completions-compatible HTTP backend (`/completions` with `logprobs`).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    /// Treat a response without log-probabilities as probability 1 for every token.
    pub allow_missing_logprobs: bool,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LmError> {
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/completions") {
            base.to_string()
        } else {
            format!("{base}/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            endpoint,
            model: model.into(),
            api_key,
            allow_missing_logprobs: false,
            agent,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    token_logprobs: Option<Vec<Option<f64>>>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Converts an OpenAI completions response body into a validated response.
pub fn parse_completions_body(
    body: &str,
    allow_missing_logprobs: bool,
) -> Result<CompletionResponse, LmError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| LmError::MalformedBackendResponse(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LmError::MalformedBackendResponse("no choices".into()))?;
    let lp = choice
        .logprobs
        .and_then(|lp| match (lp.tokens, lp.token_logprobs) {
            (Some(t), Some(l)) => Some((t, l)),
            _ => None,
        });
    match lp {
        Some((tokens, logprobs)) => {
            if tokens.len() != logprobs.len() {
                return Err(LmError::MalformedBackendResponse(format!(
                    "{} tokens but {} logprobs",
                    tokens.len(),
                    logprobs.len()
                )));
            }
            let records = tokens
                .into_iter()
                .zip(logprobs)
                .map(|(t, lp)| {
                    lp.map(|lp| TokenRecord { t: t.clone(), lp })
                        .ok_or_else(|| {
                            LmError::MalformedBackendResponse(format!(
                                "null logprob for token {t:?}"
                            ))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            CompletionResponse::new(choice.text, records)
        }
        None if allow_missing_logprobs => {
            let tokens = if choice.text.is_empty() {
                vec![]
            } else {
                vec![TokenRecord {
                    t: choice.text.clone(),
                    lp: 0.0,
                }]
            };
            CompletionResponse::new(choice.text, tokens)
        }
        None => Err(LmError::MalformedBackendResponse(
            "response carries no token logprobs".into(),
        )),
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}#{}", self.endpoint, self.model)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LmError> {
        let body = serde_json::json!({
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": 0,
            "logprobs": 1,
        });
        let mut http = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            http = http.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = http
            .send_json(&body)
            .map_err(|e| LmError::BackendUnavailable(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LmError::BackendUnavailable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(LmError::BackendUnavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(LmError::BackendRejected(format!("HTTP {status}: {text}")));
        }
        parse_completions_body(&text, self.allow_missing_logprobs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub failures: usize,
}

/// Shareable client: response cache (memory and optionally disk), bounded
/// in-flight requests, and exponential-backoff retries.
pub struct LmClient {
    backend: Box<dyn Backend>,
    backend_id: String,
    memory: Mutex<HashMap<String, CompletionResponse>>,
    cache_dir: Option<PathBuf>,
    in_flight: Semaphore,
    retry: RetryPolicy,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    failures: AtomicUsize,
}

impl std::fmt::Debug for LmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmClient")
            .field("backend", &self.backend_id)
            .field("cache_dir", &self.cache_dir)
            .finish_non_exhaustive()
    }
}

impl LmClient {
    pub fn new(backend: impl Backend + 'static) -> Self {
        let backend_id = backend.id();
        LmClient {
            backend: Box::new(backend),
            backend_id,
            memory: Mutex::new(HashMap::new()),
            cache_dir: None,
            in_flight: Semaphore::new(4),
            retry: RetryPolicy::default(),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            failures: AtomicUsize::new(0),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, LmError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        self.cache_dir = Some(dir);
        Ok(self)
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
        }
    }

    /// SHA-256 over (prompt, max_tokens, backend id).
    pub fn cache_key(&self, req: &CompletionRequest) -> String {
        let key = serde_json::json!([req.prompt, req.max_tokens, self.backend_id]);
        sha256_hex(key.to_string())
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LmError> {
        if req.prompt.is_empty() {
            return Err(LmError::InvalidRequest("empty prompt".into()));
        }
        if req.max_tokens == 0 {
            return Err(LmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        let key = self.cache_key(req);
        if let Some(hit) = self.lookup(&key)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let resp = {
            let _permit = self.in_flight.acquire();
            self.call_with_retry(req)
        };
        let resp = resp.inspect_err(|_| {
            self.failures.fetch_add(1, Ordering::SeqCst);
        })?;
        self.store(&key, &resp)?;
        Ok(resp)
    }

    fn call_with_retry(&self, req: &CompletionRequest) -> Result<CompletionResponse, LmError> {
        let mut attempt = 0;
        loop {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(req) {
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying completion");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn lookup(&self, key: &str) -> Result<Option<CompletionResponse>, LmError> {
        if let Some(hit) = self.memory.lock().expect("cache poisoned").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.cache_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{key}.json"));
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let stored: StoredResponse = match serde_json::from_str(&raw) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring corrupt cache entry");
                return Ok(None);
            }
        };
        let resp = CompletionResponse::new(stored.text, stored.tokens)?;
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), resp.clone());
        Ok(Some(resp))
    }

    fn store(&self, key: &str, resp: &CompletionResponse) -> Result<(), LmError> {
        if let Some(dir) = &self.cache_dir {
            let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
            std::fs::write(
                &tmp,
                serde_json::to_vec(&resp.to_stored()).expect("serializable"),
            )?;
            std::fs::rename(&tmp, dir.join(format!("{key}.json")))?;
        }
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), resp.clone());
        Ok(())
    }
}
