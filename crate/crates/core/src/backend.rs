//! Language-model boundary.
//!
//! [`ChatBackend`] is the single call surface the orchestrators use. Two
//! implementations ship here: [`ScriptedBackend`], a pure lookup table keyed
//! by `(role, round, example_id)` for hermetic runs, and [`OpenAiCompatClient`],
//! which speaks the OpenAI-compatible `/chat/completions` protocol.
//! [`RateLimited`] wraps either one with a concurrency cap and dispatch pacing.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use crate::domain::{AgentRole, Layer, UsageSource};

pub const ENV_API_BASE: &str = "ORGAGENT_API_BASE";
pub const ENV_API_KEY: &str = "ORGAGENT_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.3;

/// Which agent call a request belongs to. Scripted backends key on it; the
/// live client ignores it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub role: AgentRole,
    pub round: u32,
    pub example_id: String,
    pub layer: Layer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub speaker: String,
    pub content: String,
}

impl ChatTurn {
    pub fn new(speaker: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system_prompt: String,
    pub turns: Vec<ChatTurn>,
    pub max_output_tokens: Option<u32>,
    pub temperature: f64,
    pub tag: CallTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.turns.is_empty() {
            return Err(BackendError::InvalidRequest("request has no turns".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is not a finite non-negative number",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Whitespace-token estimate of everything sent to the model.
    pub fn estimated_prompt_tokens(&self) -> u64 {
        estimate_tokens(&self.system_prompt)
            + self
                .turns
                .iter()
                .map(|t| estimate_tokens(&t.content))
                .sum::<u64>()
    }
}

/// Fallback token counter used when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub finish_reason: FinishReason,
    pub usage_source: UsageSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("token budget exceeded ({ledger} >= {budget})")]
    BudgetExceeded { ledger: u64, budget: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("scenario error: {0}")]
    Scenario(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// True when responses are a pure function of the request.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[async_trait]
impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request).await
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub content: String,
    /// Missing counts fall back to the whitespace estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl ScriptedEntry {
    pub fn new(content: impl Into<String>, prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            content: content.into(),
            prompt_tokens: Some(prompt_tokens),
            completion_tokens: Some(completion_tokens),
        }
    }
}

/// Key of a scripted entry. `None` round or example id is a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptKey {
    pub role: AgentRole,
    pub round: Option<u32>,
    pub example_id: Option<String>,
}

impl ScriptKey {
    pub fn exact(role: AgentRole, round: u32, example_id: impl Into<String>) -> Self {
        Self {
            role,
            round: Some(round),
            example_id: Some(example_id.into()),
        }
    }
}

impl fmt::Display for ScriptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let round = self.round.map_or("*".to_string(), |r| r.to_string());
        let id = self.example_id.as_deref().unwrap_or("*");
        write!(f, "{}:{}:{}", self.role, round, id)
    }
}

impl std::str::FromStr for ScriptKey {
    type Err = BackendError;

    /// `ROLE:round:example_id`; round and example id may be `*`. The example
    /// id is everything after the second colon.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BackendError::Scenario(format!("bad scenario key `{s}`"));
        let mut parts = s.splitn(3, ':');
        let role = parts.next().ok_or_else(bad)?;
        let round = parts.next().ok_or_else(bad)?;
        let id = parts.next().ok_or_else(bad)?;
        let role: AgentRole = role.parse().map_err(|_| bad())?;
        let round = match round {
            "*" => None,
            r => Some(r.parse::<u32>().map_err(|_| bad())?),
        };
        let example_id = match id {
            "*" => None,
            "" => return Err(bad()),
            id => Some(id.to_string()),
        };
        Ok(Self {
            role,
            round,
            example_id,
        })
    }
}

/// Table of canned responses. Lookup is total: exact key, then the round
/// wildcard, then the example wildcard, then both, then the default entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedScenario {
    entries: BTreeMap<ScriptKey, ScriptedEntry>,
    default_entry: ScriptedEntry,
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    #[serde(default)]
    default: Option<ScriptedEntry>,
    #[serde(default)]
    entries: BTreeMap<String, ScriptedEntry>,
}

impl Default for ScriptedScenario {
    fn default() -> Self {
        Self::new(ScriptedEntry {
            content: String::new(),
            prompt_tokens: None,
            completion_tokens: None,
        })
    }
}

impl ScriptedScenario {
    pub fn new(default_entry: ScriptedEntry) -> Self {
        Self {
            entries: BTreeMap::new(),
            default_entry,
        }
    }

    pub fn insert(&mut self, key: ScriptKey, entry: ScriptedEntry) -> &mut Self {
        self.entries.insert(key, entry);
        self
    }

    pub fn with(mut self, key: &str, entry: ScriptedEntry) -> Result<Self, BackendError> {
        self.entries.insert(key.parse()?, entry);
        Ok(self)
    }

    pub fn lookup(&self, role: AgentRole, round: u32, example_id: &str) -> &ScriptedEntry {
        let candidates = [
            (Some(round), Some(example_id)),
            (Some(round), None),
            (None, Some(example_id)),
            (None, None),
        ];
        candidates
            .into_iter()
            .find_map(|(round, id)| {
                self.entries.get(&ScriptKey {
                    role,
                    round,
                    example_id: id.map(str::to_string),
                })
            })
            .unwrap_or(&self.default_entry)
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| BackendError::Scenario(e.to_string()))?;
        let mut scenario = match file.default {
            Some(d) => Self::new(d),
            None => Self::default(),
        };
        for (key, entry) in file.entries {
            scenario.entries.insert(key.parse()?, entry);
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ScenarioFile {
            default: Some(self.default_entry.clone()),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("scenario serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    scenario: Arc<ScriptedScenario>,
    latency: Option<Duration>,
}

impl ScriptedBackend {
    pub fn new(scenario: ScriptedScenario) -> Self {
        Self {
            scenario: Arc::new(scenario),
            latency: None,
        }
    }

    /// Sleeps for `latency` before every response.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn scenario(&self) -> &ScriptedScenario {
        &self.scenario
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        if let Some(latency) = self.latency {
            tokio::time::sleep(latency).await;
        }
        let tag = &request.tag;
        let entry = self.scenario.lookup(tag.role, tag.round, &tag.example_id);
        let usage_source = if entry.prompt_tokens.is_some() && entry.completion_tokens.is_some() {
            UsageSource::Provider
        } else {
            UsageSource::Estimated
        };
        Ok(ChatResponse {
            content: entry.content.clone(),
            prompt_tokens: entry
                .prompt_tokens
                .unwrap_or_else(|| request.estimated_prompt_tokens()),
            completion_tokens: entry
                .completion_tokens
                .unwrap_or_else(|| estimate_tokens(&entry.content)),
            finish_reason: FinishReason::Stop,
            usage_source,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible client

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// First backoff; doubled for each further retry.
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `ORGAGENT_API_BASE` (required) and `ORGAGENT_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| {
            BackendError::InvalidRequest(format!("{ENV_API_BASE} is not set"))
        })?;
        Ok(Self {
            api_key: std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            ..Self::new(base)
        })
    }
}

pub struct OpenAiCompatClient {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    http: reqwest::Client,
}

impl OpenAiCompatClient {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key,
            retry: config.retry,
            http,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// JSON body for a request. System prompt and turns are copied verbatim;
    /// the speaker tag rides in the message `name`.
    pub fn wire_body(request: &ChatRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system_prompt})];
        messages.extend(request.turns.iter().map(|t| {
            json!({"role": "user", "name": t.speaker, "content": t.content})
        }));
        let mut body = json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "stream": false,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    async fn attempt(&self, body: &Value) -> Result<Value, AttemptError> {
        let mut builder = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| AttemptError::retryable(BackendError::Transport(e.to_string())))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| AttemptError::retryable(BackendError::Transport(e.to_string())))?;
        if !status.is_success() {
            let error = BackendError::Provider {
                status: status.as_u16(),
                body: text,
            };
            let retry = status.as_u16() == 429 || status.is_server_error();
            return Err(AttemptError { error, retry });
        }
        serde_json::from_str(&text).map_err(|e| AttemptError {
            error: BackendError::Provider {
                status: status.as_u16(),
                body: format!("malformed response body: {e}"),
            },
            retry: false,
        })
    }
}

struct AttemptError {
    error: BackendError,
    retry: bool,
}

impl AttemptError {
    fn retryable(error: BackendError) -> Self {
        Self { error, retry: true }
    }
}

fn parse_completion(request: &ChatRequest, body: &Value) -> Result<ChatResponse, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Provider {
            status: 200,
            body: "response has no choices".into(),
        })?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let usage = body.get("usage");
    let reported = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64);
    let (prompt_tokens, completion_tokens, usage_source) =
        match (reported("prompt_tokens"), reported("completion_tokens")) {
            (Some(p), Some(c)) => (p, c, UsageSource::Provider),
            _ => (
                request.estimated_prompt_tokens(),
                estimate_tokens(&content),
                UsageSource::Estimated,
            ),
        };
    Ok(ChatResponse {
        content,
        prompt_tokens,
        completion_tokens,
        finish_reason,
        usage_source,
    })
}

#[async_trait]
impl ChatBackend for OpenAiCompatClient {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = Self::wire_body(request);
        let mut retry = 0;
        loop {
            match self.attempt(&body).await {
                Ok(value) => return parse_completion(request, &value),
                Err(e) if e.retry && retry < self.retry.max_retries => {
                    let delay = self.retry.delay(retry);
                    tracing::warn!(error = %e.error, ?delay, retry = retry + 1, "retrying chat completion");
                    tokio::time::sleep(delay).await;
                    retry += 1;
                }
                Err(e) => return Err(e.error),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rate limiting

/// Caps in-flight requests and spaces consecutive dispatches by at least
/// `min_interval`.
pub struct RateLimited<B> {
    inner: B,
    permits: Semaphore,
    min_interval: Duration,
    last_dispatch: Mutex<Option<Instant>>,
}

pub fn with_rate_limit<B: ChatBackend>(
    inner: B,
    max_in_flight: NonZeroUsize,
    min_interval: Duration,
) -> RateLimited<B> {
    RateLimited {
        inner,
        permits: Semaphore::new(max_in_flight.get()),
        min_interval,
        last_dispatch: Mutex::new(None),
    }
}

impl<B> RateLimited<B> {
    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for RateLimited<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !self.min_interval.is_zero() {
            let mut last = self.last_dispatch.lock().await;
            if let Some(prev) = *last {
                let ready = prev + self.min_interval;
                if Instant::now() < ready {
                    tokio::time::sleep_until(ready).await;
                }
            }
            *last = Some(Instant::now());
        }
        self.inner.complete(request).await
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}
