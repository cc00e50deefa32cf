//! Call an OpenAI-compatible endpoint. Needs `TRAJCHAIN_API_KEY`; set
//! `TRAJCHAIN_API_BASE` and `TRAJCHAIN_MODEL` to point elsewhere.
//!
//! `TRAJCHAIN_API_KEY=... cargo run --example live_backend`

use std::sync::Arc;

use trajchain::llm::{LiveBackend, LiveConfig};
use trajchain::synth::{generate, SynthConfig};
use trajchain::{predict, ChainConfig, ChainContext};

fn main() -> anyhow::Result<()> {
    let config = LiveConfig::default().with_env();
    if config.api_key.is_none() {
        println!("TRAJCHAIN_API_KEY is not set; nothing to do.");
        return Ok(());
    }
    let model = config.model.clone();
    let backend = Arc::new(LiveBackend::new(config)?);
    let record = generate(&SynthConfig {
        n_cases: 1,
        n_controls: 0,
        ..SynthConfig::default()
    })?
    .records
    .remove(0);
    let ctx = ChainContext::new(
        backend,
        ChainConfig {
            model,
            chunk_limit: 2048,
            ..ChainConfig::default()
        },
    );
    let r = predict(&record, &ctx)?;
    println!("risk {}/10 after {} chunks: {}", r.manager.risk_level, r.chunk_count, r.manager.reasoning);
    Ok(())
}
