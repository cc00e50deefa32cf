//! Chat-completion backends.
//!
//! [`ChatBackend`] is the single seam between the pipeline and a model.
//! [`LiveBackend`] talks to an OpenAI-compatible `/chat/completions`
//! endpoint; [`ScriptedBackend`] answers from a script so whole runs are
//! replayable offline.

mod json;
mod limiter;
mod live;
pub mod policy;
mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{extract_json, JsonExtractError};
pub use limiter::{Limiter, Permit};
pub use live::{LiveBackend, LiveConfig};
pub use scripted::{Matcher, Reply, Script, ScriptEntry, ScriptedBackend, TranscriptEntry};

use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

impl std::str::FromStr for ReasoningEffort {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "medium" => Ok(Self::Medium),
            "high" => Ok(Self::High),
            other => Err(format!("unknown reasoning effort {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub reasoning_effort: Option<ReasoningEffort>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system_prompt: system.into(),
            user_prompt: user.into(),
            temperature: 0.0,
            max_output_tokens: 4096,
            reasoning_effort: None,
        }
    }

    /// Short, stable digest of both prompts.
    pub fn digest(&self) -> String {
        prompt_digest(&self.system_prompt, &self.user_prompt)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompts must be non-empty".into()));
        }
        // also rejects NaN
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub fn prompt_digest(system: &str, user: &str) -> String {
    let mut bytes = Vec::with_capacity(system.len() + user.len() + 1);
    bytes.extend_from_slice(system.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(user.as_bytes());
    sha256_hex(&bytes)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts (last status {last_status:?}): {message}")]
    RetriesExhausted {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no script entry matches request {digest}: {preview}")]
    ScriptMiss { digest: String, preview: String },
    #[error("request {digest} matches {count} script entries in strict mode")]
    ScriptAmbiguous { digest: String, count: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Human-readable identity for run manifests.
    fn identity(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}
