//! Generate a synthetic cohort with planted markers, score it with the
//! marker-policy backend and report discrimination.
//!
//! `cargo run --release --example synthetic_end_to_end`

use std::sync::Arc;

use trajchain::cohort::{build_cohort, PhenotypeConfig};
use trajchain::eval::{evaluate, outcomes_from_predictions};
use trajchain::synth::{generate, marker_policy_script, SynthConfig};
use trajchain::{run_cohort, ChainConfig, ChainContext, ScriptedBackend};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig::default();
    let data = generate(&cfg)?;
    let (cohort, report) = build_cohort(&data.records, &PhenotypeConfig::with_codes(cfg.diagnosis_codes.clone()), "lung cancer", 7, 1)?;
    println!("cohort: {} cases, {} controls", report.cases, report.controls);

    let backend = Arc::new(ScriptedBackend::new(marker_policy_script(&cfg)));
    let ctx = ChainContext::new(
        backend,
        ChainConfig {
            chunk_limit: 256,
            ..ChainConfig::default()
        },
    );
    let records: Vec<_> = cohort.records().cloned().collect();
    let run = run_cohort(&records, &ctx, &Default::default())?;
    println!("predicted {} patients, {} failures", run.results.len(), run.failures.len());

    let outcomes = outcomes_from_predictions(&run.results);
    let eval = evaluate(&outcomes, &["age_band".into()], 500, 1);
    println!("{}", serde_json::to_string_pretty(&eval.overall)?);
    Ok(())
}
