//! Chat-completion client: generation presets, retries with exponential
//! backoff, a concurrency cap, a content-addressed response cache, an
//! OpenAI-compatible HTTP backend and a deterministic mock.

mod cache;
mod http;
mod mock;

pub use cache::CompletionCache;
pub use http::{HttpBackend, HttpConfig, KeyHeader};
pub use mock::{MockBehavior, MockLlm};

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptBundle;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request failed after {attempts} attempt(s) (last status {status:?}): {message}")]
    Transport {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    #[error("malformed completion response: {0}")]
    Protocol(String),
    #[error("llm configuration: {0}")]
    Config(String),
    #[error("completion cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_output_tokens: Option<u32>,
}

impl GenerationParams {
    pub fn gpt4(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.2,
            top_p: 0.1,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_output_tokens: None,
        }
    }

    pub fn llama3(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.5,
            top_p: 0.95,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_output_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let finite = [
            self.temperature,
            self.top_p,
            self.frequency_penalty,
            self.presence_penalty,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(LlmError::Config("generation parameters must be finite".into()));
        }
        if self.temperature < 0.0 {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::Config("top_p must be in (0, 1]".into()));
        }
        if self.model_id.is_empty() {
            return Err(LlmError::Config("model_id is empty".into()));
        }
        Ok(())
    }

    /// Output budget for a query: the explicit limit, else 4 tokens per
    /// query token.
    pub fn max_tokens_for(&self, query_len: usize) -> u32 {
        self.max_output_tokens
            .unwrap_or_else(|| u32::try_from(query_len.max(1) * 4).unwrap_or(u32::MAX))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "gpt-4")]
    Gpt4,
    #[serde(rename = "llama-3")]
    Llama3,
}

impl Preset {
    pub fn params(self, model_id: Option<&str>) -> GenerationParams {
        match self {
            Preset::Gpt4 => GenerationParams::gpt4(model_id.unwrap_or("gpt-4")),
            Preset::Llama3 => GenerationParams::llama3(model_id.unwrap_or("llama-3-70b-instruct")),
        }
    }
}

impl FromStr for Preset {
    type Err = LlmError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gpt-4" | "gpt4" => Ok(Preset::Gpt4),
            "llama-3" | "llama3" => Ok(Preset::Llama3),
            _ => Err(LlmError::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

pub fn bundle_messages(bundle: &PromptBundle) -> Vec<ChatMessage> {
    vec![
        ChatMessage {
            role: "system".into(),
            content: bundle.system_message.clone(),
        },
        ChatMessage {
            role: "user".into(),
            content: bundle.user_message.clone(),
        },
    ]
}

/// What a backend receives for one attempt.
#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub prompt_digest: &'a str,
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Throttling, server errors and transport failures.
    Retryable {
        status: Option<u16>,
        message: String,
    },
    Fatal {
        status: Option<u16>,
        message: String,
    },
    Protocol(String),
    Config(String),
}

pub trait CompletionBackend: Send + Sync {
    /// Identifies the backend and any configuration that changes its output;
    /// part of the cache key.
    fn tag(&self) -> String;
    fn endpoint(&self) -> String;
    fn send(&self, req: &ChatRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_digest: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub endpoint: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            factor: 2.0,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry `n` (1-based): `base * factor^(n-1)`, capped.
    pub fn delay(&self, n: u32) -> Duration {
        let raw = self.base_delay_ms as f64 * self.factor.max(1.0).powi(n.saturating_sub(1) as i32);
        Duration::from_millis(raw.min(self.max_delay_ms as f64) as u64)
    }
}

/// Counting semaphore that also records the peak number of holders.
#[derive(Debug)]
struct Gate {
    cap: usize,
    held: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            held: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut held = self.held.lock().unwrap_or_else(|e| e.into_inner());
        while *held >= self.cap {
            held = self.freed.wait(held).unwrap_or_else(|e| e.into_inner());
        }
        *held += 1;
        self.peak.fetch_max(*held, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut held = self.0.held.lock().unwrap_or_else(|e| e.into_inner());
        *held -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable completion client.
pub struct LlmClient {
    backend: Arc<dyn CompletionBackend>,
    policy: RetryPolicy,
    gate: Gate,
    cache: Option<CompletionCache>,
    requests: AtomicUsize,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn CompletionBackend>, policy: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backend,
            policy,
            gate: Gate::new(max_in_flight),
            cache: None,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: CompletionCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Backend calls made so far, including retries.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous backend calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.gate.peak.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, messages: &[ChatMessage], params: &GenerationParams, max_tokens: u32) -> String {
        let body = serde_json::json!({
            "backend": self.backend.tag(),
            "params": params,
            "max_tokens": max_tokens,
            "messages": messages,
        });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    /// Completes `bundle`, answering from the cache when possible.
    pub fn complete(
        &self,
        bundle: &PromptBundle,
        params: &GenerationParams,
        query_len: usize,
    ) -> Result<CompletionRecord, LlmError> {
        params.validate()?;
        let digest = bundle.digest();
        let messages = bundle_messages(bundle);
        let max_tokens = params.max_tokens_for(query_len);
        let key = self.cache_key(&messages, params, max_tokens);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                return Ok(CompletionRecord {
                    prompt_digest: digest,
                    raw_text: hit,
                    latency_ms: 0,
                    attempt_count: 1,
                    endpoint: self.backend.endpoint(),
                    cached: true,
                });
            }
        }

        let req = ChatRequest {
            prompt_digest: &digest,
            messages: &messages,
            params,
            max_tokens,
        };
        let started = Instant::now();
        let mut attempt = 0;
        let raw_text = loop {
            attempt += 1;
            let outcome = {
                let _permit = self.gate.acquire();
                self.requests.fetch_add(1, Ordering::SeqCst);
                self.backend.send(&req)
            };
            match outcome {
                Ok(text) => break text,
                Err(BackendError::Retryable { status, message }) => {
                    if attempt >= self.policy.max_attempts {
                        return Err(LlmError::Transport {
                            status,
                            message,
                            attempts: attempt,
                        });
                    }
                    let wait = self.policy.delay(attempt);
                    log::warn!("completion attempt {attempt} failed ({message}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(BackendError::Fatal { status, message }) => {
                    return Err(LlmError::Transport {
                        status,
                        message,
                        attempts: attempt,
                    })
                }
                Err(BackendError::Protocol(m)) => return Err(LlmError::Protocol(m)),
                Err(BackendError::Config(m)) => return Err(LlmError::Config(m)),
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&key, &raw_text)?;
        }
        Ok(CompletionRecord {
            prompt_digest: digest,
            raw_text,
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: attempt,
            endpoint: self.backend.endpoint(),
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn bundle(user: &str) -> PromptBundle {
        PromptBundle {
            system_message: "sys".into(),
            user_message: user.into(),
            included_example_ids: vec![],
            component_provenance: Default::default(),
        }
    }

    struct Scripted {
        replies: Mutex<VecDeque<Result<String, BackendError>>>,
        delay: Duration,
    }

    impl CompletionBackend for Scripted {
        fn tag(&self) -> String {
            "scripted".into()
        }
        fn endpoint(&self) -> String {
            "scripted://".into()
        }
        fn send(&self, _: &ChatRequest<'_>) -> Result<String, BackendError> {
            std::thread::sleep(self.delay);
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Ok("default".into()))
        }
    }

    fn scripted(replies: Vec<Result<String, BackendError>>) -> Arc<Scripted> {
        Arc::new(Scripted {
            replies: Mutex::new(replies.into()),
            delay: Duration::ZERO,
        })
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            factor: 2.0,
            max_delay_ms: 5,
        }
    }

    fn throttled() -> BackendError {
        BackendError::Retryable {
            status: Some(429),
            message: "slow down".into(),
        }
    }

    #[test]
    fn presets() {
        let g = Preset::Gpt4.params(None);
        assert_eq!(
            (g.temperature, g.top_p, g.frequency_penalty, g.presence_penalty),
            (0.2, 0.1, 0.0, 0.0)
        );
        let l = Preset::Llama3.params(None);
        assert_eq!((l.temperature, l.top_p), (0.5, 0.95));
        assert_eq!("GPT-4".parse::<Preset>().unwrap(), Preset::Gpt4);
        assert_eq!(g.max_tokens_for(7), 28);
    }

    #[test]
    fn param_validation() {
        let mut p = GenerationParams::gpt4("m");
        p.top_p = 0.0;
        assert!(p.validate().is_err());
        p.top_p = 1.0;
        p.temperature = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn backoff_is_non_decreasing_and_capped() {
        let p = RetryPolicy::default();
        let ds: Vec<_> = (1..12).map(|n| p.delay(n)).collect();
        assert!(ds.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(ds[0], Duration::from_millis(500));
        assert_eq!(*ds.last().unwrap(), Duration::from_millis(30_000));
    }

    #[test]
    fn retries_then_succeeds() {
        let c = LlmClient::new(scripted(vec![Err(throttled()), Ok("hi".into())]), fast(), 2);
        let r = c.complete(&bundle("u"), &GenerationParams::gpt4("m"), 3).unwrap();
        assert_eq!((r.raw_text.as_str(), r.attempt_count), ("hi", 2));
    }

    #[test]
    fn exhausted_retries_report_last_status() {
        let c = LlmClient::new(scripted(vec![Err(throttled()); 3]), fast(), 2);
        match c.complete(&bundle("u"), &GenerationParams::gpt4("m"), 3) {
            Err(LlmError::Transport { status, attempts, .. }) => assert_eq!((status, attempts), (Some(429), 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fatal_errors_do_not_retry() {
        let fatal = BackendError::Fatal {
            status: Some(401),
            message: "no".into(),
        };
        let c = LlmClient::new(scripted(vec![Err(fatal)]), fast(), 2);
        assert!(c.complete(&bundle("u"), &GenerationParams::gpt4("m"), 3).is_err());
        assert_eq!(c.requests_sent(), 1);
    }

    #[test]
    fn concurrency_cap_holds() {
        let backend = Arc::new(Scripted {
            replies: Mutex::new(VecDeque::new()),
            delay: Duration::from_millis(5),
        });
        let c = LlmClient::new(backend, fast(), 3);
        let params = GenerationParams::gpt4("m");
        std::thread::scope(|s| {
            for i in 0..16 {
                let (c, params) = (&c, &params);
                s.spawn(move || c.complete(&bundle(&i.to_string()), params, 1).unwrap());
            }
        });
        assert!(c.peak_in_flight() <= 3);
        assert!(c.peak_in_flight() >= 1);
        assert_eq!(c.requests_sent(), 16);
    }

    #[test]
    fn warm_cache_sends_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let params = GenerationParams::gpt4("m");
        let cold = LlmClient::new(scripted(vec![Ok("first".into())]), fast(), 1)
            .with_cache(CompletionCache::open(dir.path()).unwrap());
        assert_eq!(cold.complete(&bundle("u"), &params, 1).unwrap().raw_text, "first");
        let warm = LlmClient::new(scripted(vec![Ok("second".into())]), fast(), 1)
            .with_cache(CompletionCache::open(dir.path()).unwrap());
        let r = warm.complete(&bundle("u"), &params, 1).unwrap();
        assert_eq!((r.raw_text.as_str(), r.cached), ("first", true));
        assert_eq!(warm.requests_sent(), 0);
        let mut other = params.clone();
        other.temperature = 0.9;
        assert_eq!(warm.complete(&bundle("u"), &other, 1).unwrap().raw_text, "second");
    }
}
