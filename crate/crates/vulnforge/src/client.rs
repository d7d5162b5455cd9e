//! Chat-completion endpoint client with caching, retries, and rate limiting.
//!
//! Every stage that talks to a model goes through [`ModelClient`]. The client
//! is deliberately ignorant of what sits behind the endpoint: a hosted API, a
//! local inference server, or a scripted mock all speak the same wire shape
//! (`POST {base_url}/chat/completions`). Responses are cached on disk keyed by
//! the full request, so re-running a pipeline replays model output without
//! network traffic and a killed run resumes where it stopped.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{parse_label, ParsedLabel};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("prompt is ~{approx_tokens} tokens but the context budget is {budget}")]
    OverBudget { approx_tokens: usize, budget: usize },
    #[error("credential environment variable {env} is not set")]
    MissingCredential { env: String },
    #[error("authentication rejected by endpoint: {0}")]
    Auth(String),
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("endpoint reply malformed: {0}")]
    Protocol(String),
    #[error("no probability probe configured for this endpoint")]
    ProbeNotConfigured,
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One turn in a chat conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff_ms: 500, backoff_multiplier: 2.0 }
    }
}

/// How per-prediction probabilities are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeConfig {
    /// Renormalize the log-scores of the "1" vs "0" alternatives at the first
    /// generated label token. Falls back to sampling when the endpoint
    /// returns no per-token alternatives.
    TokenLogprob,
    /// Majority vote over `samples` independent completions.
    SampleVote {
        #[serde(default = "default_vote_samples")]
        samples: u32,
    },
}

pub fn default_vote_samples() -> u32 {
    10
}

/// Connection and budget settings for one endpoint.
///
/// `credential_env` names an environment variable; the secret itself is read
/// at request time and never stored, serialized, or logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_credential_env")]
    pub credential_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Prompt budget in tokens, approximated as characters/4 when the
    /// endpoint exposes no tokenizer.
    #[serde(default = "default_context_budget")]
    pub context_budget: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Minimum spacing between request starts, for rate-limited providers.
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

fn default_credential_env() -> String {
    "VULNFORGE_API_KEY".into()
}
fn default_max_output_tokens() -> u32 {
    512
}
fn default_context_budget() -> usize {
    512
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_in_flight() -> usize {
    4
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "local-model".into(),
            credential_env: default_credential_env(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            context_budget: default_context_budget(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            min_interval_ms: 0,
            retry: RetryPolicy::default(),
            cache_dir: None,
            probe: None,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.context_budget == 0 {
            return Err(ClientError::Protocol("context_budget must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::Protocol("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    TokenLogprob,
    SampleVote,
    None,
}

/// Classification result for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: ParsedLabel,
    /// Probability assigned to `label`; present only when a probe ran.
    pub probability: Option<f64>,
    pub raw_text: String,
    pub probe_method: ProbeMethod,
}

impl Prediction {
    fn check(self) -> Self {
        if self.probability.is_some() {
            debug_assert!(self.probe_method != ProbeMethod::None);
            debug_assert!(self.probability.unwrap() >= 0.0 && self.probability.unwrap() <= 1.0);
        }
        self
    }
}

/// Fully resolved request as handed to a transport.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: u32,
    pub want_logprobs: bool,
}

/// Decoded endpoint reply: one text per choice, plus the log-scores of the
/// alternatives observed at the first generated label token, when reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_token_scores: Option<BTreeMap<String, f64>>,
}

#[derive(Debug)]
pub enum TransportError {
    /// Worth retrying: 429, 5xx, timeouts, connection resets.
    Transient(String),
    /// Retry cannot help: auth failures, malformed requests.
    Fatal(String),
    Auth(String),
}

/// Anything that can answer a chat-completion request.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &WireRequest) -> Result<ChatReply, TransportError>;
    /// Network round trips performed so far. Cache tests assert on this.
    fn calls(&self) -> usize;
}

/// HTTP transport speaking the `/chat/completions` wire shape.
pub struct HttpTransport {
    http: reqwest::blocking::Client,
    base_url: String,
    credential_env: String,
    calls: AtomicUsize,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(HttpTransport {
            http,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            credential_env: config.credential_env.clone(),
            calls: AtomicUsize::new(0),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &WireRequest) -> Result<ChatReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let credential = std::env::var(&self.credential_env)
            .map_err(|_| TransportError::Auth(format!("{} is not set", self.credential_env)))?;

        let mut body = serde_json::json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.n > 1 {
            body["n"] = serde_json::json!(request.n);
        }
        if request.want_logprobs {
            body["logprobs"] = serde_json::json!(true);
        }

        let url = format!("{}/chat/completions", self.base_url);
        let resp = self
            .http
            .post(&url)
            .bearer_auth(&credential)
            .json(&body)
            .send()
            .map_err(|e| {
                // Error text from reqwest never echoes headers, so it cannot
                // leak the credential.
                TransportError::Transient(format!("request to {url} failed: {e}"))
            })?;

        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(TransportError::Auth(format!("endpoint returned {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("endpoint returned {status}")));
        }

        let value: serde_json::Value = resp
            .json()
            .map_err(|e| TransportError::Fatal(format!("response was not JSON: {e}")))?;
        decode_reply(&value).map_err(TransportError::Fatal)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Pull choice texts and first-label-token alternatives out of a response body.
fn decode_reply(value: &serde_json::Value) -> Result<ChatReply, String> {
    let choices = value
        .get("choices")
        .and_then(|c| c.as_array())
        .ok_or_else(|| "missing choices array".to_string())?;
    if choices.is_empty() {
        return Err("choices array is empty".into());
    }
    let mut texts = Vec::with_capacity(choices.len());
    for choice in choices {
        let content = choice
            .pointer("/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| "choice missing message.content".to_string())?;
        texts.push(content.to_string());
    }

    let mut label_token_scores = None;
    if let Some(entries) = choices[0].pointer("/logprobs/content").and_then(|c| c.as_array()) {
        for entry in entries {
            let token = entry.get("token").and_then(|t| t.as_str()).unwrap_or("");
            let trimmed = token.trim();
            if trimmed != "0" && trimmed != "1" {
                continue;
            }
            let mut scores = BTreeMap::new();
            if let (Some(tok), Some(lp)) = (
                entry.get("token").and_then(|t| t.as_str()),
                entry.get("logprob").and_then(|l| l.as_f64()),
            ) {
                scores.insert(tok.trim().to_string(), lp);
            }
            if let Some(alts) = entry.get("top_logprobs").and_then(|a| a.as_array()) {
                for alt in alts {
                    if let (Some(tok), Some(lp)) = (
                        alt.get("token").and_then(|t| t.as_str()),
                        alt.get("logprob").and_then(|l| l.as_f64()),
                    ) {
                        let key = tok.trim().to_string();
                        let slot = scores.entry(key).or_insert(f64::NEG_INFINITY);
                        if lp > *slot {
                            *slot = lp;
                        }
                    }
                }
            }
            label_token_scores = Some(scores);
            break;
        }
    }

    Ok(ChatReply { texts, label_token_scores })
}

/// Scripted transport for tests and the offline demo.
///
/// Rules are matched in order; the first whose condition holds answers the
/// request. A rule may fail with a retryable status a fixed number of times
/// before succeeding, to script outage behavior.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring match against the last message's content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_last_contains: Option<String>,
    /// Substring match against any message's content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_any_contains: Option<String>,
    /// Reply text for single-choice requests (and the fill when `samples`
    /// runs short).
    #[serde(default)]
    pub respond: String,
    /// Per-choice texts for n>1 requests, cycled if shorter than n.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<String>,
    /// Log-scores reported for the first label token when logprobs are asked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scores: Option<BTreeMap<String, f64>>,
    /// Return a transient failure this many times before answering.
    #[serde(default)]
    pub fail_first: u32,
}

impl MockRule {
    fn matches(&self, request: &WireRequest) -> bool {
        if let Some(needle) = &self.when_last_contains {
            let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
            if !last.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(needle) = &self.when_any_contains {
            if !request.messages.iter().any(|m| m.content.contains(needle.as_str())) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Answer when no rule matches; a missing default makes unmatched
    /// requests an error so fixtures stay exhaustive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockRule>,
}

pub struct MockTransport {
    script: MockScript,
    hits: Mutex<Vec<u32>>,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        MockTransport { script, hits: Mutex::new(vec![0; n]), calls: AtomicUsize::new(0) }
    }

    pub fn from_json(text: &str) -> Result<Self, ClientError> {
        let script: MockScript =
            serde_json::from_str(text).map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(Self::new(script))
    }

    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    fn answer(rule: &MockRule, request: &WireRequest) -> ChatReply {
        let texts = if request.n <= 1 {
            vec![if rule.samples.is_empty() {
                rule.respond.clone()
            } else {
                rule.samples[0].clone()
            }]
        } else if rule.samples.is_empty() {
            vec![rule.respond.clone(); request.n as usize]
        } else {
            (0..request.n as usize)
                .map(|i| rule.samples[i % rule.samples.len()].clone())
                .collect()
        };
        let label_token_scores = if request.want_logprobs { rule.label_scores.clone() } else { None };
        ChatReply { texts, label_token_scores }
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &WireRequest) -> Result<ChatReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        for (i, rule) in self.script.rules.iter().enumerate() {
            if !rule.matches(request) {
                continue;
            }
            let mut hits = self.hits.lock().unwrap();
            hits[i] += 1;
            if hits[i] <= rule.fail_first {
                return Err(TransportError::Transient("scripted 429".into()));
            }
            return Ok(Self::answer(rule, request));
        }
        match &self.script.default {
            Some(rule) => Ok(Self::answer(rule, request)),
            None => Err(TransportError::Fatal(format!(
                "no scripted rule matches request (last message: {:?})",
                request.messages.last().map(|m| truncate_for_log(&m.content))
            ))),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn truncate_for_log(s: &str) -> String {
    let mut out: String = s.chars().take(80).collect();
    if out.len() < s.len() {
        out.push_str("...");
    }
    out
}

/// Closure-backed transport for tests that need full control per request.
pub struct FnTransport<F>
where
    F: Fn(&WireRequest, usize) -> Result<ChatReply, TransportError> + Send + Sync,
{
    f: F,
    calls: AtomicUsize,
}

impl<F> FnTransport<F>
where
    F: Fn(&WireRequest, usize) -> Result<ChatReply, TransportError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnTransport { f, calls: AtomicUsize::new(0) }
    }
}

impl<F> ChatTransport for FnTransport<F>
where
    F: Fn(&WireRequest, usize) -> Result<ChatReply, TransportError> + Send + Sync,
{
    fn send(&self, request: &WireRequest) -> Result<ChatReply, TransportError> {
        let seq = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(request, seq)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Token-bucket limiter: bounded in-flight requests plus a minimum interval
/// between request starts.
struct RateLimiter {
    max_in_flight: usize,
    min_interval: Duration,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

struct LimiterState {
    in_flight: usize,
    last_start: Option<Instant>,
}

struct InFlightGuard<'a> {
    limiter: &'a RateLimiter,
}

impl RateLimiter {
    fn new(max_in_flight: usize, min_interval: Duration) -> Self {
        RateLimiter {
            max_in_flight,
            min_interval,
            state: Mutex::new(LimiterState { in_flight: 0, last_start: None }),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut state = self.state.lock().unwrap();
        while state.in_flight >= self.max_in_flight {
            state = self.freed.wait(state).unwrap();
        }
        if !self.min_interval.is_zero() {
            if let Some(last) = state.last_start {
                let elapsed = last.elapsed();
                if elapsed < self.min_interval {
                    let wait = self.min_interval - elapsed;
                    drop(state);
                    std::thread::sleep(wait);
                    state = self.state.lock().unwrap();
                    while state.in_flight >= self.max_in_flight {
                        state = self.freed.wait(state).unwrap();
                    }
                }
            }
        }
        state.in_flight += 1;
        state.last_start = Some(Instant::now());
        InFlightGuard { limiter: self }
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap();
        state.in_flight -= 1;
        drop(state);
        self.limiter.freed.notify_one();
    }
}

/// Client over one endpoint. Shareable across threads; cache writes are
/// serialized internally.
pub struct ModelClient {
    config: EndpointConfig,
    transport: Box<dyn ChatTransport>,
    limiter: RateLimiter,
    cache_write: Mutex<()>,
}

impl ModelClient {
    pub fn with_transport(
        config: EndpointConfig,
        transport: Box<dyn ChatTransport>,
    ) -> Result<Self, ClientError> {
        config.validate()?;
        if let Some(dir) = &config.cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        let limiter =
            RateLimiter::new(config.max_in_flight, Duration::from_millis(config.min_interval_ms));
        Ok(ModelClient { config, transport, limiter, cache_write: Mutex::new(()) })
    }

    /// Client backed by a live HTTP endpoint described by `config`.
    pub fn http(config: EndpointConfig) -> Result<Self, ClientError> {
        let transport = Box::new(HttpTransport::new(&config)?);
        Self::with_transport(config, transport)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn network_calls(&self) -> usize {
        self.transport.calls()
    }

    /// Approximate prompt size in tokens: characters/4, rounded up.
    pub fn approx_tokens(messages: &[ChatMessage]) -> usize {
        let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
        chars.div_ceil(4)
    }

    fn budget_check(&self, messages: &[ChatMessage]) -> Result<(), ClientError> {
        let approx = Self::approx_tokens(messages);
        if approx > self.config.context_budget {
            return Err(ClientError::OverBudget {
                approx_tokens: approx,
                budget: self.config.context_budget,
            });
        }
        Ok(())
    }

    fn cache_path(&self, request: &WireRequest) -> Option<PathBuf> {
        let dir = self.config.cache_dir.as_ref()?;
        let key = serde_json::json!({
            "endpoint": self.config.base_url,
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n,
            "logprobs": request.want_logprobs,
        });
        let mut hasher = Sha256::new();
        hasher.update(key.to_string().as_bytes());
        let digest = hasher.finalize();
        let mut name = String::with_capacity(37);
        for byte in digest.iter().take(16) {
            name.push_str(&format!("{byte:02x}"));
        }
        name.push_str(".json");
        Some(dir.join(name))
    }

    fn cache_read(&self, path: &Path) -> Option<ChatReply> {
        let text = std::fs::read_to_string(path).ok()?;
        match serde_json::from_str(&text) {
            Ok(reply) => Some(reply),
            Err(e) => {
                log::warn!("discarding unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn cache_store(&self, path: &Path, reply: &ChatReply) -> Result<(), ClientError> {
        let _guard = self.cache_write.lock().unwrap();
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(serde_json::to_string(reply).unwrap().as_bytes())?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Run one request through cache, rate limiting, and retries.
    fn round_trip(&self, request: &WireRequest) -> Result<ChatReply, ClientError> {
        let cache_path = self.cache_path(request);
        if let Some(path) = &cache_path {
            if let Some(reply) = self.cache_read(path) {
                log::debug!("cache hit for {}", path.display());
                return Ok(reply);
            }
        }

        let policy = &self.config.retry;
        let attempts = policy.max_attempts.max(1);
        let mut backoff = Duration::from_millis(policy.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            let guard = self.limiter.acquire();
            let outcome = self.transport.send(request);
            drop(guard);
            match outcome {
                Ok(reply) => {
                    if let Some(path) = &cache_path {
                        self.cache_store(path, &reply)?;
                    }
                    return Ok(reply);
                }
                Err(TransportError::Auth(msg)) => return Err(ClientError::Auth(msg)),
                Err(TransportError::Fatal(msg)) => {
                    return Err(ClientError::Exhausted { attempts: attempt, last: msg })
                }
                Err(TransportError::Transient(msg)) => {
                    log::warn!("attempt {attempt}/{attempts} failed: {msg}");
                    last_error = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff = Duration::from_millis(
                            (backoff.as_millis() as f64 * policy.backoff_multiplier) as u64,
                        );
                    }
                }
            }
        }
        Err(ClientError::Exhausted { attempts, last: last_error })
    }

    fn request(&self, messages: &[ChatMessage], n: u32, want_logprobs: bool) -> WireRequest {
        WireRequest {
            model: self.config.model_name.clone(),
            messages: messages.to_vec(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
            n,
            want_logprobs,
        }
    }

    /// Single completion. The prompt must fit the context budget.
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.budget_check(messages)?;
        let reply = self.round_trip(&self.request(messages, 1, false))?;
        reply
            .texts
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Protocol("reply carried no choices".into()))
    }

    /// Classify a function as vulnerable (1) or not (0). Attaches a
    /// probability when a probe is configured.
    pub fn classify(&self, code: &str, task_instruction: &str) -> Result<Prediction, ClientError> {
        let messages = [ChatMessage::user(format!("{task_instruction}\n{code}"))];
        match &self.config.probe {
            None => {
                let text = self.complete(&messages)?;
                Ok(Prediction {
                    label: parse_label(&text),
                    probability: None,
                    raw_text: text,
                    probe_method: ProbeMethod::None,
                }
                .check())
            }
            Some(probe) => self.probe_messages(&messages, probe.clone()),
        }
    }

    /// Probability that the model's label is what it is: renormalized token
    /// mass in `token_logprob` mode, vote frequency in `sample_vote` mode.
    /// Requires a configured probe.
    pub fn label_probability(
        &self,
        code: &str,
        task_instruction: &str,
    ) -> Result<Prediction, ClientError> {
        let probe = self.config.probe.clone().ok_or(ClientError::ProbeNotConfigured)?;
        let messages = [ChatMessage::user(format!("{task_instruction}\n{code}"))];
        self.probe_messages(&messages, probe)
    }

    fn probe_messages(
        &self,
        messages: &[ChatMessage],
        probe: ProbeConfig,
    ) -> Result<Prediction, ClientError> {
        self.budget_check(messages)?;
        match probe {
            ProbeConfig::TokenLogprob => {
                let reply = self.round_trip(&self.request(messages, 1, true))?;
                let text = reply
                    .texts
                    .first()
                    .cloned()
                    .ok_or_else(|| ClientError::Protocol("reply carried no choices".into()))?;
                let label = parse_label(&text);
                if let Some(prob) = renormalize_label_scores(reply.label_token_scores.as_ref(), label)
                {
                    return Ok(Prediction {
                        label,
                        probability: Some(prob),
                        raw_text: text,
                        probe_method: ProbeMethod::TokenLogprob,
                    }
                    .check());
                }
                log::warn!(
                    "endpoint reported no label-token alternatives; falling back to sample voting"
                );
                self.sample_vote(messages, default_vote_samples())
            }
            ProbeConfig::SampleVote { samples } => self.sample_vote(messages, samples),
        }
    }

    fn sample_vote(&self, messages: &[ChatMessage], samples: u32) -> Result<Prediction, ClientError> {
        let n = samples.max(1);
        let reply = self.round_trip(&self.request(messages, n, false))?;
        if reply.texts.is_empty() {
            return Err(ClientError::Protocol("reply carried no choices".into()));
        }
        let mut ones = 0usize;
        let mut zeros = 0usize;
        for text in &reply.texts {
            match parse_label(text) {
                ParsedLabel::One => ones += 1,
                ParsedLabel::Zero => zeros += 1,
                ParsedLabel::Unparsed => {}
            }
        }
        // Ties and all-unparsed votes err toward flagging: label 1.
        let (label, votes) = if ones >= zeros { (ParsedLabel::One, ones) } else { (ParsedLabel::Zero, zeros) };
        if ones == 0 && zeros == 0 {
            return Ok(Prediction {
                label: ParsedLabel::Unparsed,
                probability: None,
                raw_text: reply.texts[0].clone(),
                probe_method: ProbeMethod::SampleVote,
            }
            .check());
        }
        Ok(Prediction {
            label,
            probability: Some(votes as f64 / reply.texts.len() as f64),
            raw_text: reply.texts[0].clone(),
            probe_method: ProbeMethod::SampleVote,
        }
        .check())
    }
}

/// p(label) = exp(s_label) / (exp(s_0) + exp(s_1)), computed stably.
fn renormalize_label_scores(
    scores: Option<&BTreeMap<String, f64>>,
    label: ParsedLabel,
) -> Option<f64> {
    let scores = scores?;
    let s1 = *scores.get("1")?;
    let s0 = *scores.get("0")?;
    let m = s1.max(s0);
    let e1 = (s1 - m).exp();
    let e0 = (s0 - m).exp();
    match label {
        ParsedLabel::One => Some(e1 / (e1 + e0)),
        ParsedLabel::Zero => Some(e0 / (e1 + e0)),
        ParsedLabel::Unparsed => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicIsize;
    use std::sync::Arc;

    fn plain_reply(text: &str) -> ChatReply {
        ChatReply { texts: vec![text.to_string()], label_token_scores: None }
    }

    fn client_with(
        transport: Box<dyn ChatTransport>,
        mutate: impl FnOnce(&mut EndpointConfig),
    ) -> ModelClient {
        let mut config = EndpointConfig {
            retry: RetryPolicy { max_attempts: 3, initial_backoff_ms: 1, backoff_multiplier: 2.0 },
            ..EndpointConfig::default()
        };
        mutate(&mut config);
        ModelClient::with_transport(config, transport).unwrap()
    }

    #[test]
    fn over_budget_prompt_rejected_before_any_network_call() {
        let transport = Box::new(FnTransport::new(|_, _| Ok(plain_reply("ok"))));
        let client = client_with(transport, |c| c.context_budget = 10);
        let messages = [ChatMessage::user("x".repeat(200))];
        let err = client.complete(&messages).unwrap_err();
        assert!(matches!(err, ClientError::OverBudget { approx_tokens: 50, budget: 10 }));
        assert_eq!(client.network_calls(), 0);
    }

    #[test]
    fn budget_approximation_rounds_up() {
        let messages = [ChatMessage::user("abcde")];
        assert_eq!(ModelClient::approx_tokens(&messages), 2);
    }

    #[test]
    fn transient_429_twice_then_success_on_third_attempt() {
        let script = MockScript {
            rules: vec![MockRule {
                when_last_contains: Some("ping".into()),
                respond: "pong".into(),
                fail_first: 2,
                ..MockRule::default()
            }],
            default: None,
        };
        let client = client_with(Box::new(MockTransport::new(script)), |_| {});
        let text = client.complete(&[ChatMessage::user("ping")]).unwrap();
        assert_eq!(text, "pong");
        assert_eq!(client.network_calls(), 3);
    }

    #[test]
    fn retries_exhaust_with_attempt_count() {
        let script = MockScript {
            rules: vec![MockRule {
                when_last_contains: Some("ping".into()),
                respond: "pong".into(),
                fail_first: 5,
                ..MockRule::default()
            }],
            default: None,
        };
        let client = client_with(Box::new(MockTransport::new(script)), |_| {});
        let err = client.complete(&[ChatMessage::user("ping")]).unwrap_err();
        match err {
            ClientError::Exhausted { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cache_hit_answers_identically_with_zero_network_calls() {
        let dir = tempfile::tempdir().unwrap();
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule { respond: "cached answer".into(), ..MockRule::default() }),
        };
        let messages = [ChatMessage::user("stable prompt")];

        let client = client_with(Box::new(MockTransport::new(script.clone())), |c| {
            c.cache_dir = Some(dir.path().to_path_buf());
        });
        let first = client.complete(&messages).unwrap();
        let second = client.complete(&messages).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.network_calls(), 1);

        // A fresh client over the same directory replays from disk alone.
        let replay = client_with(Box::new(MockTransport::new(script)), |c| {
            c.cache_dir = Some(dir.path().to_path_buf());
        });
        let third = replay.complete(&messages).unwrap();
        assert_eq!(first, third);
        assert_eq!(replay.network_calls(), 0);
    }

    #[test]
    fn cache_distinguishes_differing_prompts() {
        let dir = tempfile::tempdir().unwrap();
        let transport = Box::new(FnTransport::new(|req: &WireRequest, _| {
            Ok(plain_reply(&format!("echo {}", req.messages[0].content)))
        }));
        let client = client_with(transport, |c| c.cache_dir = Some(dir.path().to_path_buf()));
        let a = client.complete(&[ChatMessage::user("a")]).unwrap();
        let b = client.complete(&[ChatMessage::user("b")]).unwrap();
        assert_eq!(a, "echo a");
        assert_eq!(b, "echo b");
        assert_eq!(client.network_calls(), 2);
    }

    #[test]
    fn classify_parses_labels_from_responses() {
        let script = MockScript {
            rules: vec![
                MockRule {
                    when_any_contains: Some("safe_fn".into()),
                    respond: "The code is safe. Answer: 0".into(),
                    ..MockRule::default()
                },
                MockRule {
                    when_any_contains: Some("bad_fn".into()),
                    respond: "1".into(),
                    ..MockRule::default()
                },
            ],
            default: Some(MockRule { respond: "cannot determine".into(), ..MockRule::default() }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |_| {});
        assert_eq!(client.classify("void safe_fn() {}", "Label it.").unwrap().label, ParsedLabel::Zero);
        assert_eq!(client.classify("void bad_fn() {}", "Label it.").unwrap().label, ParsedLabel::One);
        let unk = client.classify("void other() {}", "Label it.").unwrap();
        assert_eq!(unk.label, ParsedLabel::Unparsed);
        assert_eq!(unk.probe_method, ProbeMethod::None);
        assert!(unk.probability.is_none());
    }

    #[test]
    fn logprob_probe_renormalizes_two_masses() {
        let mut scores = BTreeMap::new();
        scores.insert("1".to_string(), 0.9f64.ln());
        scores.insert("0".to_string(), 0.1f64.ln());
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule {
                respond: "1".into(),
                label_scores: Some(scores),
                ..MockRule::default()
            }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.probe = Some(ProbeConfig::TokenLogprob);
        });
        let pred = client.label_probability("int f() {}", "Label it.").unwrap();
        assert_eq!(pred.label, ParsedLabel::One);
        assert_eq!(pred.probe_method, ProbeMethod::TokenLogprob);
        assert!((pred.probability.unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn logprob_probe_matches_analytic_value_for_unnormalized_scores() {
        // Raw scores need not sum to one; renormalization fixes the pair.
        let (s1, s0) = (-0.3f64, -1.7f64);
        let mut scores = BTreeMap::new();
        scores.insert("1".to_string(), s1);
        scores.insert("0".to_string(), s0);
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule {
                respond: "0".into(),
                label_scores: Some(scores),
                ..MockRule::default()
            }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.probe = Some(ProbeConfig::TokenLogprob);
        });
        let pred = client.label_probability("int f() {}", "Label it.").unwrap();
        assert_eq!(pred.label, ParsedLabel::Zero);
        let expected = s0.exp() / (s0.exp() + s1.exp());
        assert!((pred.probability.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn logprob_probe_without_alternatives_falls_back_to_voting() {
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule {
                respond: "1".into(),
                samples: vec!["1".into(), "1".into(), "0".into(), "1".into(), "1".into()],
                ..MockRule::default()
            }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.probe = Some(ProbeConfig::TokenLogprob);
        });
        let pred = client.label_probability("int f() {}", "Label it.").unwrap();
        assert_eq!(pred.probe_method, ProbeMethod::SampleVote);
        // 10 samples cycled from the 5-entry script: 8 ones, 2 zeros.
        assert_eq!(pred.label, ParsedLabel::One);
        assert!((pred.probability.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sample_vote_reports_majority_frequency() {
        let samples: Vec<String> = "1111111000".chars().map(|c| c.to_string()).collect();
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule { samples, ..MockRule::default() }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.probe = Some(ProbeConfig::SampleVote { samples: 10 });
        });
        let pred = client.label_probability("int f() {}", "Label it.").unwrap();
        assert_eq!(pred.label, ParsedLabel::One);
        assert!((pred.probability.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(pred.probe_method, ProbeMethod::SampleVote);
    }

    #[test]
    fn sample_vote_tie_flags_as_vulnerable() {
        let samples: Vec<String> = "10101010".chars().map(|c| c.to_string()).collect();
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule { samples, ..MockRule::default() }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.probe = Some(ProbeConfig::SampleVote { samples: 8 });
        });
        let pred = client.label_probability("int f() {}", "Label it.").unwrap();
        assert_eq!(pred.label, ParsedLabel::One);
        assert!((pred.probability.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probe_required_for_label_probability() {
        let transport = Box::new(FnTransport::new(|_, _| Ok(plain_reply("1"))));
        let client = client_with(transport, |_| {});
        assert!(matches!(
            client.label_probability("int f() {}", "Label it."),
            Err(ClientError::ProbeNotConfigured)
        ));
    }

    #[test]
    fn in_flight_requests_never_exceed_limit() {
        let peak = Arc::new(AtomicIsize::new(0));
        let live = Arc::new(AtomicIsize::new(0));
        let (peak2, live2) = (peak.clone(), live.clone());
        let transport = Box::new(FnTransport::new(move |_: &WireRequest, _| {
            let now = live2.fetch_add(1, Ordering::SeqCst) + 1;
            peak2.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            live2.fetch_sub(1, Ordering::SeqCst);
            Ok(plain_reply("ok"))
        }));
        let client =
            Arc::new(client_with(transport, |c| c.max_in_flight = 2));
        let mut handles = Vec::new();
        for i in 0..8 {
            let client = client.clone();
            handles.push(std::thread::spawn(move || {
                client.complete(&[ChatMessage::user(format!("req {i}"))]).unwrap()
            }));
        }
        for handle in handles {
            assert_eq!(handle.join().unwrap(), "ok");
        }
        assert!(peak.load(Ordering::SeqCst) <= 2, "peak was {}", peak.load(Ordering::SeqCst));
    }

    #[test]
    fn credential_value_never_reaches_disk() {
        let sentinel = "sk-credscan-sentinel-9981";
        std::env::set_var("VULNFORGE_TEST_CRED", sentinel);
        let dir = tempfile::tempdir().unwrap();
        let script = MockScript {
            rules: vec![],
            default: Some(MockRule { respond: "1: stack overflow in parser".into(), ..MockRule::default() }),
        };
        let client = client_with(Box::new(MockTransport::new(script)), |c| {
            c.cache_dir = Some(dir.path().to_path_buf());
            c.credential_env = "VULNFORGE_TEST_CRED".into();
        });
        client.complete(&[ChatMessage::user("first")]).unwrap();
        client.classify("int f() {}", "Label it.").unwrap();

        // Config serialization carries the variable name, not its value.
        let json = serde_json::to_string(client.config()).unwrap();
        let toml_text = toml_like(client.config());
        assert!(json.contains("VULNFORGE_TEST_CRED"));
        assert!(!json.contains(sentinel));
        assert!(!toml_text.contains(sentinel));

        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let path = entry.unwrap().path();
            let contents = std::fs::read_to_string(&path).unwrap();
            assert!(
                !contents.contains(sentinel),
                "credential leaked into {}",
                path.display()
            );
        }
    }

    // Debug formatting stands in for TOML here; the config only ever holds
    // the env var's name.
    fn toml_like(config: &EndpointConfig) -> String {
        format!("{config:?}")
    }

    #[test]
    fn mock_script_round_trips_through_json() {
        let text = r#"{
            "rules": [
                {"when_last_contains": "double-check", "respond": "confirmed", "fail_first": 1},
                {"when_any_contains": "svg_probe", "respond": "1: loop bound missing",
                 "label_scores": {"1": -0.1, "0": -2.3}}
            ],
            "default": {"respond": "0: nothing found"}
        }"#;
        let transport = MockTransport::from_json(text).unwrap();
        assert_eq!(transport.script.rules.len(), 2);
        let req = WireRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("static int svg_probe(void)")],
            temperature: 0.0,
            max_tokens: 16,
            n: 1,
            want_logprobs: false,
        };
        let reply = transport.send(&req).unwrap();
        assert_eq!(reply.texts[0], "1: loop bound missing");
        // Logprobs withheld unless the request asks for them.
        assert!(reply.label_token_scores.is_none());
    }

    #[test]
    fn unmatched_request_without_default_is_an_error() {
        let transport = MockTransport::from_json(r#"{"rules": []}"#).unwrap();
        let req = WireRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user("anything")],
            temperature: 0.0,
            max_tokens: 16,
            n: 1,
            want_logprobs: false,
        };
        assert!(matches!(transport.send(&req), Err(TransportError::Fatal(_))));
    }

    #[test]
    fn http_response_decoding_reads_choices_and_label_scores() {
        let value = serde_json::json!({
            "choices": [{
                "message": {"content": "1: off-by-one in bounds check"},
                "logprobs": {"content": [
                    {"token": "1", "logprob": -0.105360515657826,
                     "top_logprobs": [
                        {"token": "1", "logprob": -0.105360515657826},
                        {"token": "0", "logprob": -2.302585092994046}
                     ]}
                ]}
            }]
        });
        let reply = decode_reply(&value).unwrap();
        assert_eq!(reply.texts.len(), 1);
        let scores = reply.label_token_scores.unwrap();
        let p1 = renormalize_label_scores(Some(&scores), ParsedLabel::One).unwrap();
        assert!((p1 - 0.9).abs() < 1e-9);
    }

    #[test]
    fn decoding_skips_non_label_leading_tokens() {
        // "Answer: 1" style output: the label token appears mid-stream.
        let value = serde_json::json!({
            "choices": [{
                "message": {"content": "Answer: 1"},
                "logprobs": {"content": [
                    {"token": "Answer", "logprob": -0.01, "top_logprobs": []},
                    {"token": ":", "logprob": -0.02, "top_logprobs": []},
                    {"token": " 1", "logprob": -0.3,
                     "top_logprobs": [{"token": " 1", "logprob": -0.3},
                                       {"token": " 0", "logprob": -1.5}]}
                ]}
            }]
        });
        let reply = decode_reply(&value).unwrap();
        let scores = reply.label_token_scores.unwrap();
        assert!(scores.contains_key("1") && scores.contains_key("0"));
    }

    #[test]
    fn config_defaults_satisfy_invariants() {
        let config = EndpointConfig::default();
        assert!(config.validate().is_ok());
        assert_eq!(config.context_budget, 512);
        assert!(config.max_in_flight >= 1);
    }
}
