//! Phenotype raw histories, cut them at the prediction gap and draw
//! matched controls.
//!
//! `cargo run --example cohort_building`

use trajchain::cohort::{build_cohort, MatchKey, PhenotypeConfig};
use trajchain::synth::{generate, SynthConfig};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_cases: 40,
        n_controls: 120,
        seed: 5,
        ..SynthConfig::default()
    };
    let raw = generate(&cfg)?.records;
    let phenotype = PhenotypeConfig::with_codes(cfg.diagnosis_codes.clone());
    for ratio in [1, 2] {
        let (cohort, report) = build_cohort(&raw, &phenotype, "lung cancer", 1, ratio)?;
        println!("ratio {ratio}: {}", serde_json::to_string(&report)?);
        let case = &cohort.cases[0];
        let controls = &cohort.controls[..ratio];
        println!(
            "  first case {} {:?} cut at {} with {} events; controls {:?}",
            case.patient_id,
            MatchKey::of(case),
            case.cutoff(),
            case.events.len(),
            controls.iter().map(|c| c.patient_id.as_str()).collect::<Vec<_>>()
        );
    }
    Ok(())
}
