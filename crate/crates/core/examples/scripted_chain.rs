//! Run the worker chain and manager over one history with a scripted
//! backend and print every prompt exchange.
//!
//! `cargo run --example scripted_chain`

use std::sync::Arc;

use trajchain::llm::policy::Policy;
use trajchain::synth::{generate, SynthConfig};
use trajchain::{predict, ChainConfig, ChainContext, ScriptedBackend};

fn main() -> anyhow::Result<()> {
    let data = generate(&SynthConfig {
        n_cases: 1,
        n_controls: 0,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let record = &data.records[0];
    let backend = Arc::new(ScriptedBackend::with_policy(Policy::Echo).recording());
    let ctx = ChainContext::new(
        backend.clone(),
        ChainConfig {
            chunk_limit: 300,
            memory_k: 4,
            ..ChainConfig::default()
        },
    );
    let result = predict(record, &ctx)?;
    for (i, t) in backend.transcript().iter().enumerate() {
        let role = if i < result.chunk_count { format!("worker {}", i + 1) } else { "manager".into() };
        println!("== {role}: prompt {} chars, reply {} chars", t.user_prompt.len(), t.reply.len());
    }
    println!("\nchunks={} memory={} risk={}/10", result.chunk_count, result.memory_snapshot.len(), result.manager.risk_level);
    for w in &result.worker_trace {
        println!("  worker {} risk={} new_events={}", w.ordinal, w.risk.as_str(), w.new_events.len());
    }
    Ok(())
}
