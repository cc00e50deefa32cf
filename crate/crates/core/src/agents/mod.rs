//! The worker chain, long-term memory and manager synthesis.
//!
//! For chunks `c_1..c_C`, worker `i` sees the previous worker's full JSON
//! output, the last `k` memory entries and chunk `c_i`; its new events are
//! appended to the memory. The manager sees the last worker output and the
//! whole memory and returns an integer risk from 1 to 10.

mod manager;
mod memory;
mod pipeline;
mod runner;
mod worker;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::{ChunkError, DEFAULT_LIMIT};
use crate::llm::{BackendError, ChatBackend, ChatRequest, ReasoningEffort};
use crate::prompts::{Bindings, PromptError, PromptLibrary, TemplateName};
use crate::tokens::{TokenCounter, WordApprox};

pub use manager::{parse_manager_output, run_manager, ManagerOutput};
pub use memory::{normalize, render_entries, MemoryEntry, MemoryStore};
pub use pipeline::{predict, predict_chunks, PatientMeta, PredictionResult};
pub use runner::{read_predictions, run_cohort, CohortRun, FailureRecord, RunOptions};
pub use worker::{parse_worker_output, run_worker, RiskLevel3, TimedEvent, WorkerSummary};

/// What to do when a worker's output stays unparseable after the re-ask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Reuse the previous worker's summary and add no events.
    CarryForward,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub cancer_type: String,
    pub model: String,
    /// Chunk limit `l` in tokens.
    pub chunk_limit: usize,
    /// Memory window `k` given to subsequent workers.
    pub memory_k: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub reasoning_effort: Option<ReasoningEffort>,
    pub failure_policy: FailurePolicy,
    pub mode: Mode,
    /// Candidate cancer types; switches to the max-pooling templates.
    pub any_cancer: Option<Vec<String>>,
    /// Patients (or preprocessor calls) in flight at once.
    pub concurrency: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            cancer_type: "lung cancer".into(),
            model: "gpt-4.1-mini".into(),
            chunk_limit: DEFAULT_LIMIT,
            memory_k: 10,
            temperature: 0.0,
            max_output_tokens: 4096,
            reasoning_effort: None,
            failure_policy: FailurePolicy::Abort,
            mode: Mode::OneStage,
            any_cancer: None,
            concurrency: 4,
        }
    }
}

/// Everything a chain needs besides the record.
#[derive(Clone)]
pub struct ChainContext {
    pub backend: Arc<dyn ChatBackend>,
    pub prompts: Arc<PromptLibrary>,
    pub counter: Arc<dyn TokenCounter>,
    pub config: ChainConfig,
}

impl ChainContext {
    /// Built-in prompts and the default token counter.
    pub fn new(backend: Arc<dyn ChatBackend>, config: ChainConfig) -> Self {
        Self {
            backend,
            prompts: Arc::new(PromptLibrary::builtin()),
            counter: Arc::new(WordApprox),
            config,
        }
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_prompts(mut self, prompts: PromptLibrary) -> Self {
        self.prompts = Arc::new(prompts);
        self
    }

    /// Pick the any-cancer variant of a chain template when configured.
    pub(crate) fn template(&self, base: TemplateName) -> TemplateName {
        if self.config.any_cancer.is_none() {
            return base;
        }
        match base {
            TemplateName::InitialWorker => TemplateName::AnyCancerInitialWorker,
            TemplateName::SubsequentWorker => TemplateName::AnyCancerSubsequentWorker,
            TemplateName::Manager => TemplateName::AnyCancerManager,
            other => other,
        }
    }

    pub(crate) fn base_bindings(&self) -> Bindings {
        let mut b = Bindings::new().set("cancer_type", self.config.cancer_type.clone());
        if let Some(c) = &self.config.any_cancer {
            b.insert("candidate_cancers", c.join(", "));
        }
        b
    }

    pub(crate) fn request(&self, name: TemplateName, bindings: &Bindings) -> Result<ChatRequest, AgentError> {
        let (system, user) = self.prompts.get(name).render(bindings)?;
        let mut req = ChatRequest::new(self.config.model.clone(), system, user);
        req.temperature = self.config.temperature;
        req.max_output_tokens = self.config.max_output_tokens;
        req.reasoning_effort = self.config.reasoning_effort;
        Ok(req)
    }
}

/// Where in the chain an error happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage", content = "ordinal")]
pub enum Stage {
    Worker(usize),
    Manager,
    Preprocess(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Worker(i) => write!(f, "worker {i}"),
            Stage::Manager => write!(f, "manager"),
            Stage::Preprocess(i) => write!(f, "preprocessor {i}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("{stage}: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("{stage}: unusable output after re-ask ({message})")]
    Parse { stage: Stage, message: String, raw: String },
    #[error("record has no events")]
    EmptyRecord,
}

/// A chain error tagged with the patient and chunk it belongs to.
#[derive(Debug, Error)]
#[error("patient {patient_id}{}: {source}", .ordinal.map(|o| format!(" chunk {o}")).unwrap_or_default())]
pub struct PredictError {
    pub patient_id: String,
    pub ordinal: Option<usize>,
    #[source]
    pub source: AgentError,
}

/// Send `req`, parse with `parse`, and re-send the identical request once if
/// parsing fails. Returns the parsed value and the raw text it came from.
pub(crate) fn ask_parsed<T>(
    ctx: &ChainContext,
    stage: Stage,
    req: &ChatRequest,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<(T, String), AgentError> {
    let mut last = (String::new(), String::new());
    for attempt in 0..2 {
        let resp = ctx
            .backend
            .complete(req)
            .map_err(|source| AgentError::Backend { stage, source })?;
        match parse(&resp.text) {
            Ok(v) => return Ok((v, resp.text)),
            Err(message) => {
                tracing::warn!(%stage, attempt, %message, "unparseable model output");
                last = (message, resp.text);
            }
        }
    }
    Err(AgentError::Parse {
        stage,
        message: last.0,
        raw: last.1,
    })
}
