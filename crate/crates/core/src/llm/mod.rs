//! Text-generation backends behind one trait.
//!
//! Everything that talks to a model goes through [`LlmProvider`]. Two
//! families of providers ship here: [`OpenAiCompatibleProvider`] for live
//! chat-completions endpoints, and the deterministic doubles
//! ([`ScriptedProvider`], [`ScriptBook`], [`FnProvider`]) that the rest of
//! the crate uses for reproducible runs and tests.

mod http;
mod scripted;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{OpenAiCompatibleConfig, OpenAiCompatibleProvider, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use scripted::{FnProvider, ScriptBook, ScriptedProvider};

/// Sampling temperature used for agent inference unless overridden.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by backend")]
    RateLimited { retry_after: Option<Duration> },
    #[error("request of {size} chars exceeds the {window}-char context window")]
    ContextOverflow { size: usize, window: usize },
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("backend returned HTTP {status}: {message}")]
    Backend { status: u16, message: String },
    #[error("scripted provider exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    /// Error classes the retry loop is allowed to repeat.
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::RateLimited { .. } | LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_markers: Vec<String>,
    /// Ask the backend for per-token logprobs. Off for inference paths.
    #[serde(default)]
    pub want_logprobs: bool,
}

impl GenerationRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: 2048,
            stop_markers: Vec::new(),
            want_logprobs: false,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn with_stop_markers(mut self, markers: Vec<String>) -> Self {
        self.stop_markers = markers;
        self
    }

    pub fn with_logprobs(mut self, on: bool) -> Self {
        self.want_logprobs = on;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must not be empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            if matches!(m.role, Role::System | Role::User) && m.content.is_empty() {
                return Err(LlmError::InvalidRequest(format!(
                    "message {i} ({}) has empty content",
                    m.role
                )));
            }
            if m.role == Role::System && i != 0 {
                return Err(LlmError::InvalidRequest(
                    "system message must come first".into(),
                ));
            }
        }
        Ok(())
    }

    /// Size used for context-window checks, in characters of message content.
    pub fn serialized_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }

    /// Content of the first user message, which is the task query for agent episodes.
    pub fn first_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ProviderError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub per_token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
}

impl GenerationResult {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            per_token_logprobs: None,
            finish_reason: FinishReason::Stop,
        }
    }
}

/// A text-generation backend.
///
/// Implementations must be shareable across concurrently running episodes.
pub trait LlmProvider: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError>;

    /// Short label recorded in logs and memory units.
    fn model_tag(&self) -> String {
        "unknown".to_string()
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<P> {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        (**self).complete(request)
    }

    fn model_tag(&self) -> String {
        (**self).model_tag()
    }
}

/// Validate `request` and hand it to `provider`.
pub fn complete(
    provider: &dyn LlmProvider,
    request: &GenerationRequest,
) -> Result<GenerationResult, LlmError> {
    request.validate()?;
    provider.complete(request)
}

pub(crate) fn check_window(request: &GenerationRequest, window: Option<usize>) -> Result<(), LlmError> {
    if let Some(window) = window {
        let size = request.serialized_chars();
        if size > window {
            return Err(LlmError::ContextOverflow { size, window });
        }
    }
    Ok(())
}

/// Exponential backoff over the retryable error classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: u32,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2,
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    pub fn backoff_for(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.saturating_pow(attempt.saturating_sub(1));
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget runs out. `op` receives the 1-based attempt number.
    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, LlmError>,
    ) -> Result<T, LlmError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let mut wait = self.backoff_for(attempt);
                    if let LlmError::RateLimited {
                        retry_after: Some(hint),
                    } = &e
                    {
                        wait = wait.max(*hint).min(self.max_backoff);
                    }
                    tracing::debug!(attempt, ?wait, error = %e, "retrying provider call");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
