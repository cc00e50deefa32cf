use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::memory::{render_entries, MemoryEntry, MemoryStore};
use super::{ask_parsed, AgentError, ChainContext, FailurePolicy, Stage};
use crate::chunk::Chunk;
use crate::llm::extract_json;
use crate::prompts::TemplateName;
use crate::util::{format_timestamp, parse_timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskLevel3 {
    Low,
    Moderate,
    High,
}

impl RiskLevel3 {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Self::Low),
            "moderate" => Some(Self::Moderate),
            "high" => Some(Self::High),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "Low",
            Self::Moderate => "Moderate",
            Self::High => "High",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub timestamp: String,
    pub event: String,
}

/// One worker's structured output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub ordinal: usize,
    pub summary: String,
    /// Events with parseable timestamps, canonicalized.
    pub new_events: Vec<TimedEvent>,
    /// Events set aside because their timestamp did not parse.
    pub quarantined: Vec<TimedEvent>,
    pub temporal_analysis: Option<String>,
    pub risk: RiskLevel3,
    pub reasoning: String,
    /// First and last visit date of the chunk the worker read.
    pub span: Option<(NaiveDate, NaiveDate)>,
    pub warnings: Vec<String>,
    /// The model's JSON object as returned.
    pub raw: Value,
}

fn first_of<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| v.get(*k)).filter(|x| !x.is_null())
}

fn text_of(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parse a worker reply. Both the initial and the subsequent key sets are
/// accepted. Fails only when no JSON object or no valid risk level is found.
pub fn parse_worker_output(ordinal: usize, text: &str) -> Result<WorkerSummary, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    if !v.is_object() {
        return Err("expected a JSON object".into());
    }
    let assessment = first_of(&v, &["updated_risk_assessment", "risk_assessment"])
        .ok_or("missing risk assessment")?;
    let risk_raw = assessment
        .get("risk_level")
        .and_then(Value::as_str)
        .ok_or("missing risk_level")?;
    let risk = RiskLevel3::parse(risk_raw).ok_or_else(|| format!("invalid risk level {risk_raw:?}"))?;
    let reasoning = assessment.get("reasoning").map(text_of).unwrap_or_default();

    let mut warnings = Vec::new();
    let mut summary = first_of(&v, &["updated_summary", "summary"]).map(text_of).unwrap_or_default();
    if summary.trim().is_empty() {
        warnings.push("empty summary".to_string());
        summary = "(no summary provided)".into();
    }
    let temporal_analysis = v
        .get("temporal_analysis")
        .filter(|x| !x.is_null())
        .map(text_of);
    if ordinal > 1 && temporal_analysis.is_none() {
        warnings.push("missing temporal_analysis".into());
    }

    let mut new_events = Vec::new();
    let mut quarantined = Vec::new();
    let events = first_of(&v, &["new_risk_factors_or_clinical_events", "risk_factors_or_clinical_events"]);
    for item in events.and_then(Value::as_array).into_iter().flatten() {
        let timestamp = item.get("timestamp").map(text_of).unwrap_or_default();
        let event = item
            .get("event")
            .map(text_of)
            .unwrap_or_else(|| if item.is_string() { text_of(item) } else { String::new() });
        if event.trim().is_empty() {
            warnings.push(format!("dropped event without text: {item}"));
            continue;
        }
        match parse_timestamp(&timestamp) {
            Some(t) => new_events.push(TimedEvent {
                timestamp: format_timestamp(&t),
                event,
            }),
            None => {
                warnings.push(format!("quarantined event with timestamp {timestamp:?}"));
                quarantined.push(TimedEvent { timestamp, event });
            }
        }
    }

    Ok(WorkerSummary {
        ordinal,
        summary,
        new_events,
        quarantined,
        temporal_analysis,
        risk,
        reasoning,
        span: None,
        warnings,
        raw: v,
    })
}

/// Run worker `ordinal` over `chunk` and fold its events into `memory`.
///
/// `prev` must be `None` exactly for the first chunk.
pub fn run_worker(
    ctx: &ChainContext,
    chunk: &Chunk,
    prev: Option<&WorkerSummary>,
    memory: &mut MemoryStore,
) -> Result<WorkerSummary, AgentError> {
    let ordinal = chunk.ordinal;
    let stage = Stage::Worker(ordinal);
    let chunk_xml = chunk.text.strip_suffix('\n').unwrap_or(&chunk.text);
    let mut b = ctx.base_bindings().set("chunk_xml", chunk_xml);
    let template = match prev {
        None => TemplateName::InitialWorker,
        Some(p) => {
            b.insert("previous_summary", serde_json::to_string_pretty(&p.raw).expect("json"));
            b.insert("memory_events", render_entries(memory.last_k(ctx.config.memory_k)));
            TemplateName::SubsequentWorker
        }
    };
    let req = ctx.request(ctx.template(template), &b)?;
    let mut out = match ask_parsed(ctx, stage, &req, |t| parse_worker_output(ordinal, t)) {
        Ok((w, _)) => w,
        Err(e @ AgentError::Parse { .. }) => match (ctx.config.failure_policy, prev) {
            (FailurePolicy::CarryForward, Some(p)) => {
                tracing::warn!(ordinal, "carrying forward previous summary");
                let mut w = p.clone();
                w.ordinal = ordinal;
                w.new_events.clear();
                w.quarantined.clear();
                w.warnings = vec![format!("carried forward: {e}")];
                w
            }
            _ => return Err(e),
        },
        Err(e) => return Err(e),
    };
    out.span = chunk.span;
    for ev in &out.new_events {
        memory.append(MemoryEntry {
            timestamp: ev.timestamp.clone(),
            event: ev.event.clone(),
            source_chunk: ordinal,
        });
    }
    Ok(out)
}
