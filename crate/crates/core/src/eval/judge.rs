use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm::{extract_json, BackendError, ChatBackend, ChatRequest};
use crate::prompts::{Bindings, PromptError, PromptLibrary, TemplateName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rubric {
    ClinicalCorrectness,
    Completeness,
    ClinicalReasoning,
    TemporalReasoning,
    Clarity,
}

impl Rubric {
    pub const ALL: [Rubric; 5] = [
        Self::ClinicalCorrectness,
        Self::Completeness,
        Self::ClinicalReasoning,
        Self::TemporalReasoning,
        Self::Clarity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::ClinicalCorrectness => "1. Clinical Correctness and Plausibility",
            Self::Completeness => "2. Completeness and Detail",
            Self::ClinicalReasoning => "3. Clinical Reasoning and Justification",
            Self::TemporalReasoning => "4. Longitudinal and Temporal Reasoning",
            Self::Clarity => "5. Clarity and Actionability",
        }
    }

    /// Match by leading number or by the name without its number.
    pub fn parse(s: &str) -> Option<Self> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|r| {
            let label = r.label().to_ascii_lowercase();
            let (num, name) = label.split_once(". ").expect("labels are numbered");
            t == label || t == name || t.starts_with(&format!("{num}.")) || t == num
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
    Tie,
}

impl Winner {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model a" | "a" => Some(Self::A),
            "model b" | "b" => Some(Self::B),
            "tie" => Some(Self::Tie),
            _ => None,
        }
    }

    /// Score of the candidate shown as Model A: win 1, tie 0.5, loss 0.
    pub fn score_for_a(self) -> f64 {
        match self {
            Self::A => 1.0,
            Self::Tie => 0.5,
            Self::B => 0.0,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
            Self::Tie => Self::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub rubric: Rubric,
    /// Winner as labelled in that run's prompt.
    pub winner: Winner,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRun {
    /// `true` when candidate `a` was presented as Model B.
    pub swapped: bool,
    pub overall: Winner,
    pub verdicts: Vec<JudgeVerdict>,
    pub raw: String,
}

impl JudgeRun {
    fn score_a(&self, w: Winner) -> f64 {
        if self.swapped {
            w.swapped().score_for_a()
        } else {
            w.score_for_a()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub rubric: Rubric,
    pub score_a: f64,
    pub score_b: f64,
}

/// Both orderings and the order-averaged scores of candidates `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairJudgement {
    pub patient_id: String,
    pub runs: [JudgeRun; 2],
    pub rubric_scores: Vec<RubricScore>,
    pub overall_a: f64,
    pub overall_b: f64,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("judge backend: {0}")]
    Backend(#[from] BackendError),
    #[error("unusable verdict after re-ask: {message}")]
    Parse { message: String, raw: String },
}

#[derive(Clone)]
pub struct JudgeContext {
    pub backend: Arc<dyn ChatBackend>,
    pub prompts: Arc<PromptLibrary>,
    pub model: String,
    pub cancer_type: String,
    /// Prediction horizon in years, as stated to the judge.
    pub years: f64,
}

fn fmt_years(y: f64) -> String {
    if y.fract() == 0.0 {
        format!("{y:.0}")
    } else {
        y.to_string()
    }
}

/// Parse one judge reply into the overall winner and five verdicts.
pub fn parse_verdict(text: &str) -> Result<(Winner, Vec<JudgeVerdict>), String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let overall = v
        .pointer("/evaluation_summary/overall_winner")
        .and_then(Value::as_str)
        .and_then(Winner::parse)
        .ok_or("missing or invalid overall_winner")?;
    let items = v
        .get("rubric_comparison")
        .and_then(Value::as_array)
        .ok_or("missing rubric_comparison")?;
    let mut verdicts: Vec<JudgeVerdict> = Vec::new();
    for it in items {
        let name = it.get("rubric").and_then(Value::as_str).unwrap_or_default();
        let rubric = Rubric::parse(name).ok_or_else(|| format!("unknown rubric {name:?}"))?;
        let w = it.get("winner").and_then(Value::as_str).unwrap_or_default();
        let winner = Winner::parse(w).ok_or_else(|| format!("invalid winner {w:?} for {name}"))?;
        if verdicts.iter().any(|x| x.rubric == rubric) {
            return Err(format!("rubric {name:?} repeated"));
        }
        verdicts.push(JudgeVerdict {
            rubric,
            winner,
            justification: it.get("justification").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    if verdicts.len() != Rubric::ALL.len() {
        return Err(format!("expected 5 rubric verdicts, got {}", verdicts.len()));
    }
    verdicts.sort_by_key(|x| x.rubric);
    Ok((overall, verdicts))
}

fn run_once(ctx: &JudgeContext, first: &str, second: &str, diagnosis: &str, swapped: bool) -> Result<JudgeRun, JudgeError> {
    let b = Bindings::new()
        .set("cancer_type", ctx.cancer_type.clone())
        .set("years", fmt_years(ctx.years))
        .set("diagnosis", diagnosis)
        .set("model_a_output", first)
        .set("model_b_output", second);
    let (system, user) = ctx.prompts.get(TemplateName::Judge).render(&b)?;
    let req = ChatRequest::new(ctx.model.clone(), system, user);
    let mut last = (String::new(), String::new());
    for _ in 0..2 {
        let text = ctx.backend.complete(&req)?.text;
        match parse_verdict(&text) {
            Ok((overall, verdicts)) => {
                return Ok(JudgeRun {
                    swapped,
                    overall,
                    verdicts,
                    raw: text,
                })
            }
            Err(m) => last = (m, text),
        }
    }
    Err(JudgeError::Parse {
        message: last.0,
        raw: last.1,
    })
}

/// Ground-truth sentence given to the judge.
pub fn diagnosis_text(label: u8, cancer_type: &str, years: f64) -> String {
    if label == 1 {
        format!("Diagnosed with {cancer_type} within {} years", fmt_years(years))
    } else {
        format!("Not diagnosed with {cancer_type} within {} years", fmt_years(years))
    }
}

/// Judge `a` against `b` in both presentation orders and average.
pub fn judge_pair(ctx: &JudgeContext, patient_id: &str, a: &str, b: &str, label: u8) -> Result<PairJudgement, JudgeError> {
    let diagnosis = diagnosis_text(label, &ctx.cancer_type, ctx.years);
    let r1 = run_once(ctx, a, b, &diagnosis, false)?;
    let r2 = run_once(ctx, b, a, &diagnosis, true)?;
    let rubric_scores = Rubric::ALL
        .iter()
        .map(|&rubric| {
            let w = |r: &JudgeRun| r.verdicts.iter().find(|v| v.rubric == rubric).expect("all rubrics").winner;
            let score_a = (r1.score_a(w(&r1)) + r2.score_a(w(&r2))) / 2.0;
            RubricScore {
                rubric,
                score_a,
                score_b: 1.0 - score_a,
            }
        })
        .collect();
    let overall_a = (r1.score_a(r1.overall) + r2.score_a(r2.overall)) / 2.0;
    Ok(PairJudgement {
        patient_id: patient_id.to_string(),
        runs: [r1, r2],
        rubric_scores,
        overall_a,
        overall_b: 1.0 - overall_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Matcher, Reply, Script, ScriptedBackend};

    pub(crate) fn verdict_json(overall: &str, winners: [&str; 5]) -> String {
        let items: Vec<Value> = Rubric::ALL
            .iter()
            .zip(winners)
            .map(|(r, w)| serde_json::json!({"rubric": r.label(), "winner": w, "justification": "j"}))
            .collect();
        serde_json::json!({
            "evaluation_summary": {"overall_winner": overall, "overall_justification": "o"},
            "rubric_comparison": items,
        })
        .to_string()
    }

    fn ctx(script: Script) -> JudgeContext {
        JudgeContext {
            backend: Arc::new(ScriptedBackend::new(script)),
            prompts: Arc::new(PromptLibrary::builtin()),
            model: "judge".into(),
            cancer_type: "lung cancer".into(),
            years: 1.0,
        }
    }

    #[test]
    fn win_then_tie_scores_three_quarters() {
        // run 1 shows OUT-A first; run 2 shows OUT-B first
        let script = Script::new(true)
            .entry(
                Matcher::contains("Model A Output:\nOUT-A"),
                Reply::text(verdict_json("Model A", ["Model A"; 5])),
            )
            .entry(
                Matcher::contains("Model A Output:\nOUT-B"),
                Reply::text(verdict_json("Tie", ["Tie"; 5])),
            );
        let j = judge_pair(&ctx(script), "p", "OUT-A", "OUT-B", 1).unwrap();
        assert!(j.rubric_scores.iter().all(|r| r.score_a == 0.75 && r.score_b == 0.25));
        assert_eq!(j.overall_a, 0.75);
    }

    #[test]
    fn always_tie_is_half() {
        let script = Script::new(false).entry(Matcher::any(), Reply::text(verdict_json("Tie", ["Tie"; 5])));
        let j = judge_pair(&ctx(script), "p", "x", "y", 0).unwrap();
        assert!(j.rubric_scores.iter().all(|r| r.score_a == 0.5));
    }

    #[test]
    fn malformed_verdict_is_reasked_then_fails() {
        let b = Arc::new(ScriptedBackend::new(
            Script::new(false).entry(Matcher::any(), Reply::text("{\"evaluation_summary\": {}}")),
        ));
        let c = JudgeContext {
            backend: b.clone(),
            ..ctx(Script::default())
        };
        assert!(matches!(judge_pair(&c, "p", "x", "y", 0), Err(JudgeError::Parse { .. })));
        assert_eq!(b.call_count(), 2);
    }

    #[test]
    fn rubric_names() {
        assert_eq!(Rubric::parse("4. Longitudinal and Temporal Reasoning"), Some(Rubric::TemporalReasoning));
        assert_eq!(Rubric::parse("clarity and actionability"), Some(Rubric::Clarity));
        assert_eq!(Rubric::parse("6. Other"), None);
        assert_eq!(Winner::parse("MODEL B"), Some(Winner::B));
    }
}
