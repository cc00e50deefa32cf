use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::memory::{render_entries, MemoryStore};
use super::worker::WorkerSummary;
use super::{ask_parsed, AgentError, ChainContext, Stage};
use crate::llm::extract_json;
use crate::prompts::TemplateName;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerOutput {
    pub risk_evolution_summary: String,
    pub final_events: Vec<String>,
    /// Integer risk in `1..=10`.
    pub risk_level: u8,
    pub reasoning: String,
    /// The key the event list was found under, if any.
    pub events_key: Option<String>,
    pub raw: String,
}

impl ManagerOutput {
    pub fn score(&self) -> f64 {
        f64::from(self.risk_level) / 10.0
    }
}

fn integer_risk(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn event_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(o) => match (o.get("timestamp"), o.get("event")) {
            (Some(Value::String(t)), Some(Value::String(e))) => format!("{t}: {e}"),
            _ => v.to_string(),
        },
        other => other.to_string(),
    }
}

/// Parse a manager reply. The event list is accepted under any key of the
/// form `final_*_related_events`, since the template's key embeds the
/// cancer type.
pub fn parse_manager_output(text: &str) -> Result<ManagerOutput, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let assessment = obj.get("final_risk_assessment").ok_or("missing final_risk_assessment")?;
    let level_v = assessment.get("risk_level").ok_or("missing risk_level")?;
    let level = integer_risk(level_v).ok_or_else(|| format!("risk_level {level_v} is not an integer"))?;
    if !(1..=10).contains(&level) {
        return Err(format!("risk_level {level} outside 1..=10"));
    }
    let events_key = obj
        .keys()
        .find(|k| k.starts_with("final_") && k.ends_with("_related_events"))
        .cloned();
    let final_events = events_key
        .as_ref()
        .and_then(|k| obj[k].as_array())
        .map(|a| a.iter().map(event_text).collect())
        .unwrap_or_default();
    let string = |k: &str| match obj.get(k) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    };
    Ok(ManagerOutput {
        risk_evolution_summary: string("risk_evolution_summary"),
        final_events,
        risk_level: level as u8,
        reasoning: assessment
            .get("reasoning")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        events_key,
        raw: text.to_string(),
    })
}

/// Synthesize the final assessment from the last worker output and the full
/// memory.
pub fn run_manager(
    ctx: &ChainContext,
    last: &WorkerSummary,
    memory: &MemoryStore,
    time_of_prediction: NaiveDate,
) -> Result<ManagerOutput, AgentError> {
    let b = ctx
        .base_bindings()
        .set("time_of_prediction", time_of_prediction.format("%Y-%m-%d").to_string())
        .set("final_worker_outputs", serde_json::to_string_pretty(&last.raw).expect("json"))
        .set("universal_memory_events", render_entries(memory.entries()));
    let req = ctx.request(ctx.template(TemplateName::Manager), &b)?;
    ask_parsed(ctx, Stage::Manager, &req, parse_manager_output).map(|(m, _)| m)
}
