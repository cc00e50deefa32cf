//! Aggregate per-chunk risk states into age-banded transition counts for
//! a Sankey diagram.
//!
//! `cargo run --example risk_transitions`

use std::sync::Arc;

use trajchain::cohort::{build_cohort, PhenotypeConfig};
use trajchain::insights::{aggregate_transitions, birth_dates, write_transitions_csv};
use trajchain::synth::{generate, marker_policy_script, SynthConfig};
use trajchain::{run_cohort, ChainConfig, ChainContext, ScriptedBackend};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_cases: 20,
        n_controls: 40,
        seed: 12,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    let (cohort, _) = build_cohort(&data.records, &PhenotypeConfig::with_codes(cfg.diagnosis_codes.clone()), "lung cancer", 2, 1)?;
    let ctx = ChainContext::new(
        Arc::new(ScriptedBackend::new(marker_policy_script(&cfg))),
        ChainConfig {
            chunk_limit: 200,
            ..ChainConfig::default()
        },
    );
    let records: Vec<_> = cohort.records().cloned().collect();
    let preds = run_cohort(&records, &ctx, &Default::default())?.results;
    let table = aggregate_transitions(&preds, &birth_dates(&preds), 10);
    println!("{} patients, {} transitions", table.patients, table.details.len());
    write_transitions_csv(&table.transitions, std::io::stdout())?;
    Ok(())
}
