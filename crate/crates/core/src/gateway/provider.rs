//! Chat-completion providers: the HTTP client for the de-facto
//! `/chat/completions` shape and an in-process mock.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    pub model_id: String,
}

impl GenParams {
    pub fn synthesis(model_id: impl Into<String>) -> Self {
        Self { temperature: 1.0, max_tokens: 2048, n_samples: 1, model_id: model_id.into() }
    }

    pub fn evaluation(model_id: impl Into<String>) -> Self {
        Self { temperature: 0.8, max_tokens: 1024, n_samples: 100, model_id: model_id.into() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if self.n_samples == 0 {
            return Err("n_samples must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub provider: String,
    pub model_id: String,
    pub usage: Usage,
    pub latency_ms: u64,
    #[serde(default)]
    pub retries: u32,
    /// Set when the provider answered but produced no usable text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One call: the prompt, sampling parameters and the index of this sample
/// among repeated draws of the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub params: GenParams,
    pub sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient failure (status {status:?}): {message}")]
    Retryable { status: Option<u16>, message: String, retry_after: Option<Duration> },
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("request failed (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<RawResponse, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub name: String,
    /// `openai-chat` (HTTP) is the only network kind.
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub endpoint: String,
    pub model_id: String,
    /// Environment variable holding the bearer token; `None` sends no auth.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// USD per million prompt tokens.
    #[serde(default)]
    pub price_prompt_per_mtok: f64,
    /// USD per million completion tokens.
    #[serde(default)]
    pub price_completion_per_mtok: f64,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_kind() -> String {
    "openai-chat".into()
}
fn default_in_flight() -> usize {
    8
}
fn default_retries() -> u32 {
    5
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_cap() -> u64 {
    30_000
}
fn default_timeout() -> u64 {
    120
}

impl ProviderConfig {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: default_kind(),
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            api_key_env: None,
            price_prompt_per_mtok: 0.0,
            price_completion_per_mtok: 0.0,
            requests_per_second: None,
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff_base(),
            backoff_cap_ms: default_backoff_cap(),
            timeout_s: default_timeout(),
        }
    }
}

/// Blocking client for an OpenAI-compatible chat-completion endpoint.
pub struct HttpChatProvider {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    /// Resolves the credential up front so a missing key fails before any
    /// network traffic.
    pub fn new(config: &ProviderConfig) -> Result<Self, super::GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => {
                    return Err(super::GatewayError::Credential { provider: config.name.clone(), env_var: var.clone() })
                }
            },
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        Ok(Self { name: config.name.clone(), endpoint: config.endpoint.clone(), api_key, agent })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatProvider for HttpChatProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<RawResponse, ProviderError> {
        let body = json!({
            "model": request.params.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
            "n": 1,
        });
        let started = Instant::now();
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| ProviderError::Retryable {
            status: None,
            message: e.to_string(),
            retry_after: None,
        })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp.body_mut().read_to_string().map_err(|e| ProviderError::Retryable {
            status: Some(status),
            message: e.to_string(),
            retry_after: None,
        })?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth { status }),
            408 | 429 | 500..=599 => {
                return Err(ProviderError::Retryable {
                    status: Some(status),
                    message: truncate(&text, 200),
                    retry_after,
                })
            }
            _ => return Err(ProviderError::Fatal { status: Some(status), message: truncate(&text, 200) }),
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| ProviderError::Fatal {
            status: Some(status),
            message: format!("malformed response body: {e}"),
        })?;
        let content = parsed.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default();
        let usage = parsed
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        let error = content.is_empty().then(|| "empty completion".to_string());
        Ok(RawResponse {
            text: content,
            provider: self.name.clone(),
            model_id: request.params.model_id.clone(),
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            retries: 0,
            error,
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync;

/// In-process provider driven by a closure. Token usage is approximated by
/// whitespace-separated word counts so ledgers stay deterministic.
#[derive(Clone)]
pub struct MockProvider {
    name: String,
    responder: Arc<Responder>,
}

impl MockProvider {
    pub fn new(
        name: impl Into<String>,
        responder: impl Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), responder: Arc::new(responder) }
    }

    /// Always answers `text`.
    pub fn canned(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(name, move |_| Ok(text.clone()))
    }
}

impl ChatProvider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<RawResponse, ProviderError> {
        let text = (self.responder)(request)?;
        let error = text.is_empty().then(|| "empty completion".to_string());
        Ok(RawResponse {
            usage: Usage {
                prompt_tokens: request.prompt.split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            provider: self.name.clone(),
            model_id: request.params.model_id.clone(),
            latency_ms: 0,
            retries: 0,
            error,
        })
    }
}
