use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::manager::{run_manager, ManagerOutput};
use super::memory::{MemoryEntry, MemoryStore};
use super::worker::{run_worker, WorkerSummary};
use super::{AgentError, ChainContext, Mode, PredictError};
use crate::chunk::{chunk, Chunk};
use crate::record::{PatientRecord, Sex};
use crate::two_stage::{two_stage_chunks, TwoStageReport};
use crate::xml::to_xml;

/// Record-level facts kept with a prediction for stratified reports and
/// transition tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub index_date: NaiveDate,
    pub cutoff: NaiveDate,
    pub age_at_cutoff: i32,
    pub first_event: Option<NaiveDate>,
    pub visit_count: usize,
    pub event_count: usize,
    pub xml_tokens: usize,
    pub gap_years: f64,
}

impl PatientMeta {
    pub fn of(record: &PatientRecord, xml_tokens: usize) -> Self {
        let cutoff = record.cutoff();
        Self {
            birth_date: record.demographics.birth_date,
            sex: record.demographics.sex,
            index_date: record.index_date,
            cutoff,
            age_at_cutoff: record.age_at(cutoff),
            first_event: record.events.first().map(|e| e.date()),
            visit_count: record.visit_count(),
            event_count: record.events.len(),
            xml_tokens,
            gap_years: record.gap_years,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub patient_id: String,
    pub label: u8,
    pub cancer_type: String,
    pub meta: PatientMeta,
    pub manager: ManagerOutput,
    pub worker_trace: Vec<WorkerSummary>,
    pub memory_snapshot: Vec<MemoryEntry>,
    /// `risk_level / 10`.
    pub score: f64,
    /// Chunks the worker chain actually read.
    pub chunk_count: usize,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageReport>,
}

/// Worker trace, final memory and manager output of one chain.
pub type ChainOutput = (Vec<WorkerSummary>, MemoryStore, ManagerOutput);

/// Fold the worker chain over `chunks` and run the manager.
pub fn predict_chunks(
    ctx: &ChainContext,
    chunks: &[Chunk],
    time_of_prediction: NaiveDate,
) -> Result<ChainOutput, (Option<usize>, AgentError)> {
    let mut memory = MemoryStore::new();
    let mut trace: Vec<WorkerSummary> = Vec::with_capacity(chunks.len());
    for c in chunks {
        let w = run_worker(ctx, c, trace.last(), &mut memory).map_err(|e| (Some(c.ordinal), e))?;
        tracing::debug!(ordinal = c.ordinal, risk = w.risk.as_str(), memory = memory.len(), "worker done");
        trace.push(w);
    }
    let last = trace.last().ok_or((None, AgentError::EmptyRecord))?;
    let manager = run_manager(ctx, last, &memory, time_of_prediction).map_err(|e| (None, e))?;
    Ok((trace, memory, manager))
}

/// Run the whole pipeline for one record: XML, chunking, the optional
/// preprocessing wave, the worker chain and the manager.
pub fn predict(record: &PatientRecord, ctx: &ChainContext) -> Result<PredictionResult, PredictError> {
    let started = Instant::now();
    let tag = |ordinal, source| PredictError {
        patient_id: record.patient_id.clone(),
        ordinal,
        source,
    };
    if record.events.is_empty() {
        return Err(tag(None, AgentError::EmptyRecord));
    }
    let doc = to_xml(record);
    let xml_tokens = ctx.counter.count(&doc.text);
    let chunks = chunk(&doc, ctx.config.chunk_limit, ctx.counter.as_ref()).map_err(|e| tag(None, e.into()))?;
    let (chunks, two_stage) = match ctx.config.mode {
        Mode::OneStage => (chunks, None),
        Mode::TwoStage => {
            let (c, report) = two_stage_chunks(ctx, &doc, chunks).map_err(|e| tag(None, e))?;
            (c, Some(report))
        }
    };
    let (worker_trace, memory, manager) =
        predict_chunks(ctx, &chunks, record.cutoff()).map_err(|(o, e)| tag(o, e))?;
    Ok(PredictionResult {
        patient_id: record.patient_id.clone(),
        label: record.label,
        cancer_type: ctx.config.cancer_type.clone(),
        meta: PatientMeta::of(record, xml_tokens),
        score: manager.score(),
        manager,
        worker_trace,
        memory_snapshot: memory.into_entries(),
        chunk_count: chunks.len(),
        wall_time_ms: started.elapsed().as_millis() as u64,
        two_stage,
    })
}
