use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::policy::{self, Policy};
use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::tokens::{TokenCounter, WordApprox};

/// Conditions on a request; every condition given must hold. An empty
/// matcher matches every request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    /// Substring of the system or user prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains_all: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains_none: Vec<String>,
    /// Prompt digest as reported by [`ChatRequest::digest`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn contains(s: impl Into<String>) -> Self {
        Self {
            contains: Some(s.into()),
            ..Self::default()
        }
    }

    pub fn digest(d: impl Into<String>) -> Self {
        Self {
            digest: Some(d.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, req: &ChatRequest, digest: &str) -> bool {
        let has = |s: &str| req.user_prompt.contains(s) || req.system_prompt.contains(s);
        self.contains.as_deref().is_none_or(has)
            && self.contains_all.iter().all(|s| has(s))
            && !self.contains_none.iter().any(|s| has(s))
            && self.digest.as_deref().is_none_or(|d| d == digest)
    }
}

/// Canned text or a built-in response policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
}

impl Reply {
    pub fn text(s: impl Into<String>) -> Self {
        Self {
            text: Some(s.into()),
            policy: None,
        }
    }

    pub fn policy(p: Policy) -> Self {
        Self {
            text: None,
            policy: Some(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match", default)]
    pub matcher: Matcher,
    pub reply: Reply,
}

/// Ordered matcher → reply pairs.
///
/// Strict scripts require every request to match exactly one entry.
/// Otherwise the first matching entry wins and `fallback` answers misses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Reply>,
}

impl Script {
    pub fn new(strict: bool) -> Self {
        Self {
            strict,
            ..Self::default()
        }
    }

    pub fn entry(mut self, matcher: Matcher, reply: Reply) -> Self {
        self.entries.push(ScriptEntry { matcher, reply });
        self
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let script: Script = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_yaml::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?
        };
        script.validate()?;
        Ok(script)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("script serializes")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let replies = self.entries.iter().map(|e| &e.reply).chain(self.fallback.as_ref());
        for r in replies {
            if r.text.is_some() == r.policy.is_some() {
                return Err(BackendError::Config(
                    "each reply needs exactly one of `text` or `policy`".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub reply: String,
}

/// Deterministic backend answering from a [`Script`].
pub struct ScriptedBackend {
    script: Script,
    name: String,
    calls: AtomicUsize,
    transcript: Option<Mutex<Vec<TranscriptEntry>>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            name: "scripted".into(),
            calls: AtomicUsize::new(0),
            transcript: None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let mut b = Self::new(Script::load(path)?);
        b.name = format!("scripted:{}", path.display());
        Ok(b)
    }

    /// Backend driven by a single policy for every request.
    pub fn with_policy(policy: Policy) -> Self {
        Self::new(Script::new(false).entry(Matcher::any(), Reply::policy(policy)))
    }

    /// Record every request and reply.
    pub fn recording(mut self) -> Self {
        self.transcript = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .unwrap_or_default()
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn select(&self, req: &ChatRequest, digest: &str) -> Result<&Reply, BackendError> {
        let mut hits = self
            .script
            .entries
            .iter()
            .filter(|e| e.matcher.matches(req, digest));
        let miss = || BackendError::ScriptMiss {
            digest: digest.to_string(),
            preview: req.user_prompt.chars().take(120).collect(),
        };
        if self.script.strict {
            let first = hits.next().ok_or_else(miss)?;
            let extra = hits.count();
            if extra > 0 {
                return Err(BackendError::ScriptAmbiguous {
                    digest: digest.to_string(),
                    count: extra + 1,
                });
            }
            return Ok(&first.reply);
        }
        hits.next()
            .map(|e| &e.reply)
            .or(self.script.fallback.as_ref())
            .ok_or_else(miss)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        let reply = self.select(request, &digest)?;
        let text = match (&reply.text, &reply.policy) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => policy::respond(p, request).ok_or_else(|| BackendError::ScriptMiss {
                digest: digest.clone(),
                preview: format!("policy {p:?} cannot answer this request"),
            })?,
            (None, None) => return Err(BackendError::Config("empty reply".into())),
        };
        if let Some(t) = &self.transcript {
            t.lock().unwrap_or_else(|e| e.into_inner()).push(TranscriptEntry {
                digest,
                system_prompt: request.system_prompt.clone(),
                user_prompt: request.user_prompt.clone(),
                reply: text.clone(),
            });
        }
        Ok(ChatResponse {
            input_tokens: (WordApprox.count(&request.system_prompt) + WordApprox.count(&request.user_prompt)) as u64,
            output_tokens: WordApprox.count(&text) as u64,
            latency_ms: 0,
            text,
        })
    }

    fn identity(&self) -> String {
        self.name.clone()
    }
}
