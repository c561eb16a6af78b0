//! Provider-agnostic chat-completion access: prompt templates, retries with
//! exponential backoff, per-provider rate limiting, the transcript cache and
//! usage accounting.

pub mod cache;
pub mod extract;
pub mod provider;
pub mod ratelimit;
pub mod template;
pub mod usage;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

pub use cache::{transcript_key, CacheMode, TranscriptCache, TranscriptEntry};
pub use extract::{extract_code, CodeSnippet, ExtractError};
pub use provider::{
    ChatProvider, CompletionRequest, GenParams, HttpChatProvider, MockProvider, ProviderConfig, ProviderError,
    RawResponse, Usage,
};
pub use ratelimit::{InFlightLimit, TokenBucket};
pub use template::{render_prompt, PromptTemplate, TemplateError, TemplateId};
pub use usage::{cost_report, read_usage_file, CostReport, Pricing, UsageEntry, UsageLedger};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider `{provider}`: credential environment variable `{env_var}` is not set")]
    Credential { provider: String, env_var: String },
    #[error("provider `{provider}`: credentials rejected (HTTP {status})")]
    AuthRejected { provider: String, status: u16 },
    #[error("provider `{provider}`: gave up after {attempts} attempt(s), last status {status:?}: {message}")]
    Transport { provider: String, status: Option<u16>, attempts: u32, message: String },
    #[error("provider `{provider}`: no recorded transcript for request {key}")]
    TranscriptMiss { provider: String, key: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("transcript cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("provider `{provider}`: unsupported kind `{kind}`")]
    UnsupportedKind { provider: String, kind: String },
}

impl GatewayError {
    /// Errors that say the provider cannot produce more output right now, as
    /// opposed to misconfiguration.
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, GatewayError::Transport { .. } | GatewayError::TranscriptMiss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): `base · 2^attempt`,
    /// raised to any server-provided `Retry-After`, never above `cap`.
    pub fn delay(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = self.base.saturating_mul(1u32 << attempt.min(20));
        exp.max(retry_after.unwrap_or_default()).min(self.cap)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base: Duration::from_millis(500), cap: Duration::from_secs(30) }
    }
}

/// A provider wrapped with retries, rate limiting, caching and accounting.
/// Shareable across threads.
pub struct Gateway {
    name: String,
    provider: Option<Arc<dyn ChatProvider>>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    in_flight: InFlightLimit,
    cache: Option<Arc<TranscriptCache>>,
    ledger: Arc<UsageLedger>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            name: provider.name().to_string(),
            provider: Some(provider),
            retry: RetryPolicy::default(),
            limiter: None,
            in_flight: InFlightLimit::new(8),
            cache: None,
            ledger: Arc::new(UsageLedger::in_memory()),
        }
    }

    /// A gateway that can only answer from `cache`.
    pub fn replay_only(name: impl Into<String>, cache: Arc<TranscriptCache>) -> Self {
        Self {
            name: name.into(),
            provider: None,
            retry: RetryPolicy::default(),
            limiter: None,
            in_flight: InFlightLimit::new(8),
            cache: Some(cache),
            ledger: Arc::new(UsageLedger::in_memory()),
        }
    }

    /// Builds a gateway from a provider config. In replay-only mode no client
    /// is constructed, so no credential is needed.
    pub fn from_config(
        config: &ProviderConfig,
        transcript_dir: Option<&Path>,
        mode: CacheMode,
        ledger: Arc<UsageLedger>,
    ) -> Result<Self, GatewayError> {
        let cache = match transcript_dir {
            Some(dir) => Some(Arc::new(TranscriptCache::open(&dir.join(format!("{}.jsonl", config.name)), mode)?)),
            None => None,
        };
        let provider: Option<Arc<dyn ChatProvider>> = match (mode, &cache) {
            (CacheMode::ReplayOnly, Some(_)) => None,
            _ => {
                if config.kind != "openai-chat" {
                    return Err(GatewayError::UnsupportedKind {
                        provider: config.name.clone(),
                        kind: config.kind.clone(),
                    });
                }
                Some(Arc::new(HttpChatProvider::new(config)?))
            }
        };
        let mut gw = Self {
            name: config.name.clone(),
            provider,
            retry: RetryPolicy {
                max_retries: config.max_retries,
                base: Duration::from_millis(config.backoff_base_ms),
                cap: Duration::from_millis(config.backoff_cap_ms),
            },
            limiter: None,
            in_flight: InFlightLimit::new(config.max_in_flight),
            cache,
            ledger,
        };
        if let Some(rps) = config.requests_per_second.filter(|r| *r > 0.0) {
            gw = gw.with_rate_limit(rps, rps.max(1.0));
        }
        Ok(gw)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, per_second: f64, burst: f64) -> Self {
        self.limiter = Some(TokenBucket::new(per_second, burst));
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.in_flight = InFlightLimit::new(max);
        self
    }

    pub fn with_cache(mut self, cache: Arc<TranscriptCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<UsageLedger>) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ledger(&self) -> &Arc<UsageLedger> {
        &self.ledger
    }

    /// Sends one prompt. `sample_index` distinguishes repeated draws of the
    /// same prompt; `tag` labels the call in the usage ledger.
    pub fn complete(
        &self,
        prompt: &str,
        params: &GenParams,
        sample_index: u32,
        tag: &str,
    ) -> Result<RawResponse, GatewayError> {
        params.validate().map_err(GatewayError::InvalidParams)?;
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let request = CompletionRequest { prompt: prompt.to_string(), params: params.clone(), sample_index };
        let key = transcript_key(&self.name, &request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                self.ledger.record(&self.name, &hit.model_id, hit.usage, true, tag);
                return Ok(hit);
            }
        }
        let provider = match (&self.provider, self.cache.as_ref().map(|c| c.mode())) {
            (Some(p), None | Some(CacheMode::ReadWrite)) => p,
            _ => return Err(GatewayError::TranscriptMiss { provider: self.name.clone(), key }),
        };
        let response = self.call_with_retries(provider.as_ref(), &request)?;
        if let Some(cache) = &self.cache {
            cache.insert(TranscriptEntry {
                key,
                provider: self.name.clone(),
                sample_index,
                temperature: params.temperature,
                max_tokens: params.max_tokens,
                prompt: request.prompt.clone(),
                response: response.clone(),
            })?;
        }
        self.ledger.record(&self.name, &response.model_id, response.usage, false, tag);
        Ok(response)
    }

    fn call_with_retries(
        &self,
        provider: &dyn ChatProvider,
        request: &CompletionRequest,
    ) -> Result<RawResponse, GatewayError> {
        let _slot = self.in_flight.enter();
        let mut attempt = 0u32;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match provider.complete(request) {
                Ok(mut resp) => {
                    resp.retries = attempt;
                    return Ok(resp);
                }
                Err(ProviderError::Auth { status }) => {
                    return Err(GatewayError::AuthRejected { provider: self.name.clone(), status })
                }
                Err(ProviderError::Fatal { status, message }) => {
                    return Err(GatewayError::Transport {
                        provider: self.name.clone(),
                        status,
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(ProviderError::Retryable { status, message, retry_after }) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            provider: self.name.clone(),
                            status,
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    let delay = self.retry.delay(attempt, retry_after);
                    log::debug!("{}: retry {} after {:?} ({message})", self.name, attempt + 1, delay);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}
