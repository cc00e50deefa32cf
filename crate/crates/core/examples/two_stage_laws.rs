//! When does parallel preprocessing shorten the chain? Prints the modeled
//! sequential call counts and runs one record through both modes.
//!
//! `cargo run --example two_stage_laws`

use std::sync::Arc;

use trajchain::agents::Mode;
use trajchain::llm::policy::Policy;
use trajchain::synth::{generate, SynthConfig};
use trajchain::two_stage::{break_even_chunks, modeled_sequential_calls, relative_gain};
use trajchain::{predict, ChainConfig, ChainContext, ScriptedBackend};

fn main() -> anyhow::Result<()> {
    println!("q     break-even C   gain at C=10");
    for q in [1.5, 2.0, 4.0, 8.0] {
        println!("{q:<5} {:<14.3} {:.3}", break_even_chunks(q)?, relative_gain(10.0, q));
    }
    println!("\nC   one-stage  two-stage (q=2)");
    for c in [1.0, 2.0, 3.0, 10.0, 40.0] {
        let (one, two) = modeled_sequential_calls(c, 2.0);
        println!("{c:<3} {one:<10} {two}");
    }

    let record = generate(&SynthConfig {
        n_cases: 1,
        n_controls: 0,
        seed: 9,
        ..SynthConfig::default()
    })?
    .records
    .remove(0);
    for mode in [Mode::OneStage, Mode::TwoStage] {
        let config = ChainConfig {
            chunk_limit: 250,
            mode,
            ..ChainConfig::default()
        };
        let r = predict(&record, &ChainContext::new(Arc::new(ScriptedBackend::with_policy(Policy::Echo)), config))?;
        match r.two_stage {
            Some(t) => println!("\n{mode:?}: C={} C_new={} sequential calls {} -> {}", t.c, t.c_new, t.sequential_calls_one_stage, t.sequential_calls_two_stage),
            None => println!("\n{mode:?}: {} chunks, {} sequential calls", r.chunk_count, r.chunk_count + 1),
        }
    }
    Ok(())
}
