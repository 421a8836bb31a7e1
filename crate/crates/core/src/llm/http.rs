use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatRequest, CompletionBackend, LlmError};

pub const ENV_ENDPOINT: &str = "DYNPROMPT_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "DYNPROMPT_LLM_API_KEY";
pub const ENV_API_VERSION: &str = "DYNPROMPT_LLM_API_VERSION";

/// How the API key is sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyHeader {
    /// `Authorization: Bearer <key>`
    #[default]
    Bearer,
    /// `api-key: <key>`
    ApiKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub key_header: KeyHeader,
    /// Sent as the `api-version` query parameter when set.
    pub api_version: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            key_header: KeyHeader::Bearer,
            api_version: None,
            timeout_secs: default_timeout(),
        }
    }

    /// Fills unset fields from `DYNPROMPT_LLM_*` environment variables.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_empty() {
            self.endpoint = std::env::var(ENV_ENDPOINT).unwrap_or_default();
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok();
        }
        if self.api_version.is_none() {
            self.api_version = std::env::var(ENV_API_VERSION).ok();
        }
        self
    }
}

/// OpenAI-compatible chat-completions backend.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if config.endpoint.is_empty() {
            return Err(LlmError::Config(format!("no endpoint configured (set {ENV_ENDPOINT})")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }
}

pub(crate) fn request_body(req: &ChatRequest<'_>) -> Value {
    json!({
        "model": req.params.model_id,
        "messages": req.messages,
        "temperature": req.params.temperature,
        "top_p": req.params.top_p,
        "frequency_penalty": req.params.frequency_penalty,
        "presence_penalty": req.params.presence_penalty,
        "max_tokens": req.max_tokens,
    })
}

pub(crate) fn first_choice(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("invalid JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
}

impl CompletionBackend for HttpBackend {
    fn tag(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    fn endpoint(&self) -> String {
        self.config.endpoint.clone()
    }

    fn send(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        let mut url = reqwest::Url::parse(&self.config.endpoint)
            .map_err(|e| BackendError::Config(format!("bad endpoint {:?}: {e}", self.config.endpoint)))?;
        if let Some(v) = &self.config.api_version {
            url.query_pairs_mut().append_pair("api-version", v);
        }
        let mut rb = self.client.post(url).json(&request_body(req));
        if let Some(key) = &self.config.api_key {
            rb = match self.config.key_header {
                KeyHeader::Bearer => rb.bearer_auth(key),
                KeyHeader::ApiKey => rb.header("api-key", key),
            };
        }
        let resp = rb.send().map_err(|e| BackendError::Retryable {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| BackendError::Retryable {
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        if status.is_success() {
            return first_choice(&body);
        }
        let message = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
        let status = Some(status.as_u16());
        if status == Some(429) || status.is_some_and(|s| s >= 500) {
            Err(BackendError::Retryable { status, message })
        } else {
            Err(BackendError::Fatal { status, message })
        }
    }
}
