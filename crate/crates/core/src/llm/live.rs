use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Limiter};

/// Settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` is appended.
    pub api_base: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub max_in_flight: usize,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            api_base: "https://api.openai.com/v1".into(),
            api_key: None,
            model: "gpt-4.1-mini".into(),
            timeout_secs: 120,
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            max_in_flight: 8,
        }
    }
}

impl LiveConfig {
    /// Overlay `TRAJCHAIN_API_BASE`, `TRAJCHAIN_API_KEY` and `TRAJCHAIN_MODEL`.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("TRAJCHAIN_API_BASE") {
            self.api_base = v;
        }
        if let Ok(v) = std::env::var("TRAJCHAIN_API_KEY") {
            self.api_key = Some(v);
        }
        if let Ok(v) = std::env::var("TRAJCHAIN_MODEL") {
            self.model = v;
        }
        self
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
        Duration::from_millis(ms.min(self.backoff_cap_ms))
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    limiter: Arc<Limiter>,
}

enum Attempt {
    Done(String, u64),
    Retry(Option<u16>, String),
    Fail(BackendError),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        if config.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = Arc::new(Limiter::new(config.max_in_flight.max(1)));
        Ok(Self { config, client, limiter })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let model = if req.model.is_empty() { &self.config.model } else { &req.model };
        let mut body = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "max_completion_tokens": req.max_output_tokens,
        });
        // reasoning models reject an explicit temperature
        match req.reasoning_effort {
            Some(effort) => body["reasoning_effort"] = json!(effort),
            None => body["temperature"] = json!(req.temperature),
        }
        body
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let started = Instant::now();
        let mut rb = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = match rb.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(None, e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Some(status), e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(Some(status), text);
        }
        if !(200..300).contains(&status) {
            return Attempt::Fail(BackendError::Http { status, body: text });
        }
        Attempt::Done(text, started.elapsed().as_millis() as u64)
    }

    /// POST `body` to `{api_base}/{path}` with bounded retries on 429, 5xx
    /// and transport errors. Returns the 2xx body and its latency.
    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<(String, u64), BackendError> {
        let _permit = self.limiter.acquire();
        let url = format!("{}/{path}", self.config.api_base.trim_end_matches('/'));
        let mut last = (None, String::new());
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&url, body) {
                Attempt::Done(text, ms) => return Ok((text, ms)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(status, msg) => {
                    tracing::warn!(attempt, ?status, "transient backend failure");
                    last = (status, msg);
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(self.config.backoff(attempt));
                    }
                }
            }
        }
        Err(BackendError::RetriesExhausted {
            attempts: self.config.max_attempts,
            last_status: last.0,
            message: last.1,
        })
    }
}

fn decode(text: &str) -> Result<ChatResponse, BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::Decode(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Decode("missing choices[0].message.content".into()))?;
    let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        text: content.to_string(),
        input_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
        latency_ms: 0,
    })
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let (text, ms) = self.post("chat/completions", &self.body(request))?;
        let mut r = decode(&text)?;
        r.latency_ms = ms;
        Ok(r)
    }

    fn identity(&self) -> String {
        format!("live:{}@{}", self.config.model, self.config.api_base)
    }
}
