//! Chat-completion dispatch.
//!
//! A [`Provider`] performs exactly one request. [`Client`] wraps a provider
//! with the retry schedule and wall-clock latency capture, so the live
//! OpenAI-compatible transport and the fixture-driven [`MockProvider`] go
//! through identical bookkeeping.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("request timed out")]
    Timeout,
    #[error("provider returned HTTP {status}")]
    HttpError { status: u16, body: String },
    #[error("provider response has no message content: {0}")]
    MalformedProviderResponse(String),
    #[error("no mock fixture for prompt digest {0}")]
    FixtureMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    /// Timeouts, 429 and 5xx are retried; everything else fails fast.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout => true,
            LlmError::HttpError { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            LlmError::MissingApiKey(_) => "MissingApiKey",
            LlmError::Timeout => "Timeout",
            LlmError::HttpError { .. } => "HttpError",
            LlmError::MalformedProviderResponse(_) => "MalformedProviderResponse",
            LlmError::FixtureMiss(_) => "FixtureMiss",
            LlmError::Transport(_) => "Transport",
            LlmError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_seconds: f64,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_id: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            timeout_seconds: 120.0,
            max_retries: 2,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        let url = Url::parse(&self.endpoint_url).map_err(|e| LlmError::InvalidConfig(format!("endpoint_url: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(LlmError::InvalidConfig("endpoint_url must be http(s)".into()));
        }
        if !(self.timeout_seconds > 0.0 && self.timeout_seconds.is_finite()) {
            return Err(LlmError::InvalidConfig("timeout_seconds must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidConfig("temperature must be within [0, 2]".into()));
        }
        if self.model_id.is_empty() {
            return Err(LlmError::InvalidConfig("model_id is empty".into()));
        }
        Ok(())
    }

    /// `{endpoint_url}/chat/completions`
    pub fn chat_completions_url(&self) -> Result<Url, LlmError> {
        let base = self.endpoint_url.trim_end_matches('/');
        Url::parse(&format!("{base}/chat/completions")).map_err(|e| LlmError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub latency_seconds: f64,
    pub attempt_count: u32,
    pub provider_id: String,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    /// One request, no retries.
    fn send(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Debug, Serialize)]
pub struct ChatMessage<'a> {
    pub role: &'static str,
    pub content: &'a str,
}

#[derive(Debug, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: Vec<ChatMessage<'a>>,
    pub temperature: f64,
}

impl<'a> ChatRequest<'a> {
    /// The whole prompt goes out as a single user message.
    pub fn new(prompt: &'a str, config: &'a ProviderConfig) -> Self {
        ChatRequest {
            model: &config.model_id,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: config.temperature,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// Extracts `choices[0].message.content` from a chat-completion body.
pub fn extract_content(body: &str) -> Result<String, LlmError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedProviderResponse(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| LlmError::MalformedProviderResponse("choices[0].message.content missing".into()))
}

pub struct OpenAiProvider {
    http: reqwest::blocking::Client,
    url: Url,
    config: ProviderConfig,
    api_key: String,
    id: String,
}

impl OpenAiProvider {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::MissingApiKey(config.api_key_env.clone()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_seconds))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(OpenAiProvider {
            http,
            url: config.chat_completions_url()?,
            id: format!("openai-compatible:{}", config.model_id),
            config: config.clone(),
            api_key,
        })
    }
}

impl Provider for OpenAiProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, prompt: &str) -> Result<String, LlmError> {
        let response = self
            .http
            .post(self.url.clone())
            .bearer_auth(&self.api_key)
            .json(&ChatRequest::new(prompt, &self.config))
            .send()
            .map_err(|e| if e.is_timeout() { LlmError::Timeout } else { LlmError::Transport(e.to_string()) })?;
        let status = response.status();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(LlmError::HttpError { status: status.as_u16(), body });
        }
        extract_content(&body)
    }
}

/// Lowercase hex SHA-256 of the prompt bytes; the mock's lookup key.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Timeout,
    Http(u16),
    Malformed,
}

impl From<&ScriptedError> for LlmError {
    fn from(e: &ScriptedError) -> Self {
        match e {
            ScriptedError::Timeout => LlmError::Timeout,
            ScriptedError::Http(status) => LlmError::HttpError { status: *status, body: String::new() },
            ScriptedError::Malformed => LlmError::MalformedProviderResponse("scripted".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scripted {
    Reply(String),
    Error(ScriptedError),
}

/// Digest to the outcomes of successive calls. The last outcome repeats.
pub type MockFixtures = BTreeMap<String, Vec<Scripted>>;

#[derive(Debug, Default)]
pub struct MockProvider {
    fixtures: MockFixtures,
    calls: Mutex<HashMap<String, usize>>,
}

impl MockProvider {
    pub fn new(fixtures: MockFixtures) -> Self {
        MockProvider { fixtures, calls: Mutex::default() }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidConfig(format!("mock fixtures {}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| LlmError::InvalidConfig(format!("mock fixtures {}: {e}", path.display())))?;
        Ok(Self::new(fixtures))
    }

    /// Total calls served so far for a digest.
    pub fn calls_for(&self, digest: &str) -> usize {
        self.calls.lock().unwrap().get(digest).copied().unwrap_or(0)
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        "mock"
    }

    fn send(&self, prompt: &str) -> Result<String, LlmError> {
        let digest = prompt_digest(prompt);
        let script = self
            .fixtures
            .get(&digest)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| LlmError::FixtureMiss(digest.clone()))?;
        let n = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry(digest).or_insert(0);
            *n += 1;
            *n - 1
        };
        match &script[n.min(script.len() - 1)] {
            Scripted::Reply(text) => Ok(text.clone()),
            Scripted::Error(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles each retry (1s, 2s, 4s, ...).
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << (retry.saturating_sub(1)).min(16))
    }
}

#[derive(Clone)]
pub struct Client {
    provider: Arc<dyn Provider>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("provider", &self.provider.id()).field("retry", &self.retry).finish()
    }
}

impl Client {
    pub fn new(provider: Arc<dyn Provider>, retry: RetryPolicy) -> Self {
        Client { provider, retry }
    }

    /// Live client for an OpenAI-compatible endpoint.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, LlmError> {
        let provider = OpenAiProvider::from_config(config)?;
        Ok(Client::new(Arc::new(provider), RetryPolicy { max_retries: config.max_retries, ..RetryPolicy::default() }))
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn complete(&self, prompt: &str) -> Result<Completion, LlmError> {
        let started = Instant::now();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            match self.provider.send(prompt) {
                Ok(raw_text) => {
                    return Ok(Completion {
                        raw_text,
                        latency_seconds: started.elapsed().as_secs_f64(),
                        attempt_count: attempt,
                        provider_id: self.provider.id().to_string(),
                    })
                }
                Err(e) if e.is_retryable() && attempt <= self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay_before_retry(attempt));
                }
                Err(e) => return Err(e),
            }
        }
    }
}
