//! Pairwise judging with both presentation orders averaged. A judge that
//! always prefers the first answer ends up neutral.
//!
//! `cargo run --example llm_judge`

use std::sync::Arc;

use trajchain::eval::{judge_pair, JudgeContext, Rubric};
use trajchain::llm::{Matcher, Reply, Script};
use trajchain::prompts::PromptLibrary;
use trajchain::ScriptedBackend;

fn verdict(winner: &str) -> String {
    let items: Vec<_> = Rubric::ALL
        .iter()
        .map(|r| serde_json::json!({"rubric": r.label(), "winner": winner, "justification": "scripted"}))
        .collect();
    serde_json::json!({
        "evaluation_summary": {"overall_winner": winner, "overall_justification": "scripted"},
        "rubric_comparison": items,
    })
    .to_string()
}

fn main() -> anyhow::Result<()> {
    let a = "Risk 8/10: new pulmonary nodule followed by weight loss.";
    let b = "Risk 3/10: routine visits only.";
    for (name, script) in [
        ("position-biased judge", Script::new(false).entry(Matcher::any(), Reply::text(verdict("Model A")))),
        (
            "judge that prefers the first candidate's content",
            Script::new(true)
                .entry(Matcher::contains(format!("Model A Output:\n{a}")), Reply::text(verdict("Model A")))
                .entry(Matcher::contains(format!("Model A Output:\n{b}")), Reply::text(verdict("Model B"))),
        ),
    ] {
        let ctx = JudgeContext {
            backend: Arc::new(ScriptedBackend::new(script)),
            prompts: Arc::new(PromptLibrary::builtin()),
            model: "judge".into(),
            cancer_type: "lung cancer".into(),
            years: 1.0,
        };
        let j = judge_pair(&ctx, "p1", a, b, 1)?;
        println!("{name}: overall score for A = {}", j.overall_a);
        for r in &j.rubric_scores {
            println!("  {:<40} A={} B={}", r.rubric.label(), r.score_a, r.score_b);
        }
    }
    Ok(())
}
