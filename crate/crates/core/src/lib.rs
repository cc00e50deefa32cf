//! Chain-of-agents temporal reasoning over longitudinal patient event records.
//!
//! The pipeline turns a [`record::PatientRecord`] into a nested, time-ordered
//! XML document ([`xml`]), cuts it into temporally coherent chunks
//! ([`chunk`]), runs a sequential chain of worker agents that share a
//! deduplicated long-term memory, and lets a manager agent synthesize a
//! 1-10 risk score ([`agents`]). Around that core sit a two-stage
//! parallel-preprocessing variant ([`two_stage`]), case-control cohort
//! construction ([`cohort`]), a seeded synthetic data generator
//! ([`synth`]), discrimination metrics and a pairwise LLM judge ([`eval`]),
//! and population-level aggregation ([`insights`]).
//!
//! Every model call goes through [`llm::ChatBackend`]; the scripted backend
//! makes all of it runnable offline and deterministic.

pub mod agents;
pub mod chunk;
pub mod cli;
pub mod cohort;
pub mod eval;
pub mod insights;
pub mod llm;
pub mod prompts;
pub mod record;
pub mod synth;
pub mod tokens;
pub mod two_stage;
pub mod xml;

pub(crate) mod util;

pub use agents::{predict, run_cohort, ChainConfig, ChainContext, PredictionResult};
pub use chunk::{chunk, Chunk};
pub use llm::{ChatBackend, ChatRequest, ChatResponse, ScriptedBackend};
pub use record::{ClinicalEvent, Cohort, Demographics, Modality, PatientRecord};
pub use tokens::{TokenCounter, WordApprox};
pub use xml::{to_xml, XmlDocument};
