//! OpenAI-compatible `/v1/chat/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_window, FinishReason, GenerationRequest, GenerationResult, LlmError, LlmProvider,
    RetryPolicy, Role, TokenLogprob,
};

pub const ENV_BASE_URL: &str = "BIZAGENT_BASE_URL";
pub const ENV_API_KEY: &str = "BIZAGENT_API_KEY";
pub const ENV_MODEL: &str = "BIZAGENT_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiCompatibleConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    /// Character budget for a request's message contents.
    pub context_window: Option<usize>,
    #[serde(skip)]
    pub retry: RetryPolicy,
}

impl Default for OpenAiCompatibleConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".to_string(),
            api_key: None,
            model: "default".to_string(),
            timeout_secs: 120,
            context_window: None,
            retry: RetryPolicy::default(),
        }
    }
}

impl OpenAiCompatibleConfig {
    /// Defaults overridden by `BIZAGENT_BASE_URL`, `BIZAGENT_API_KEY`, `BIZAGENT_MODEL`.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(ENV_BASE_URL) {
            cfg.base_url = v;
        }
        if let Ok(v) = std::env::var(ENV_API_KEY) {
            cfg.api_key = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            cfg.model = v;
        }
        cfg
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub struct OpenAiCompatibleProvider {
    config: OpenAiCompatibleConfig,
    http: reqwest::blocking::Client,
}

impl OpenAiCompatibleProvider {
    pub fn new(config: OpenAiCompatibleConfig) -> Result<Self, LlmError> {
        if config.base_url.trim().is_empty() {
            return Err(LlmError::InvalidConfig("base_url is required".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| LlmError::InvalidConfig(format!("failed to build HTTP client: {e}")))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &OpenAiCompatibleConfig {
        &self.config
    }

    fn send_once(&self, body: &WireRequest<'_>) -> Result<GenerationResult, LlmError> {
        let mut req = self.http.post(self.config.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp
            .text()
            .map_err(|e| LlmError::Transport(format!("failed reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text, retry_after));
        }
        parse_reply(&text)
    }
}

impl LlmProvider for OpenAiCompatibleProvider {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        request.validate()?;
        check_window(request, self.config.context_window)?;
        let body = WireRequest::from_request(&self.config.model, request);
        self.config.retry.run(|_| self.send_once(&body))
    }

    fn model_tag(&self) -> String {
        self.config.model.clone()
    }
}

fn classify_status(status: u16, body: &str, retry_after: Option<Duration>) -> LlmError {
    let lower = body.to_ascii_lowercase();
    match status {
        429 => LlmError::RateLimited { retry_after },
        400 | 413
            if lower.contains("context_length_exceeded")
                || lower.contains("maximum context length")
                || lower.contains("context window") =>
        {
            LlmError::ContextOverflow { size: 0, window: 0 }
        }
        502..=504 => LlmError::Transport(format!("gateway returned HTTP {status}")),
        _ => LlmError::Backend {
            status,
            message: body.chars().take(500).collect(),
        },
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<&'a str>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
    stream: bool,
}

impl<'a> WireRequest<'a> {
    fn from_request(model: &'a str, request: &'a GenerationRequest) -> Self {
        let messages = request
            .messages
            .iter()
            .map(|m| WireMessage {
                // Observations travel as user turns: plain chat endpoints reject
                // `tool` messages that lack a native tool_call_id.
                role: match m.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                },
                content: &m.content,
            })
            .collect();
        Self {
            model,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
            stop: request.stop_markers.iter().map(String::as_str).collect(),
            logprobs: request.want_logprobs,
            stream: false,
        }
    }
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

fn parse_reply(body: &str) -> Result<GenerationResult, LlmError> {
    let reply: WireReply = serde_json::from_str(body)
        .map_err(|e| LlmError::MalformedBackendReply(format!("{e}")))?;
    let choice = reply
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::MalformedBackendReply("no choices in reply".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| LlmError::MalformedBackendReply("choice has no text content".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("content_filter") | Some("error") => FinishReason::ProviderError,
        _ => FinishReason::Stop,
    };
    Ok(GenerationResult {
        text,
        per_token_logprobs: choice.logprobs.and_then(|l| l.content),
        finish_reason,
    })
}
