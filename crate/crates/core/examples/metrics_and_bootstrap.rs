//! Rank metrics with tie handling, curve points and percentile bootstrap
//! intervals.
//!
//! `cargo run --example metrics_and_bootstrap`

use trajchain::eval::{auprc, auroc, bootstrap_ci, curves, trapezoid, ScoredOutcome};

fn main() -> anyhow::Result<()> {
    // risk levels 1..10 mapped to scores, so ties are common
    let data = [(9, 1), (8, 1), (8, 0), (7, 1), (5, 0), (5, 1), (3, 0), (2, 0), (2, 0), (1, 0), (6, 1), (4, 0)];
    let outcomes: Vec<ScoredOutcome> = data
        .iter()
        .enumerate()
        .map(|(i, &(level, label))| ScoredOutcome::new(format!("p{i}"), f64::from(level) / 10.0, label))
        .collect();
    let roc = curves(&outcomes)?;
    println!("AUROC {:.4} (trapezoid over {} ROC points: {:.4})", auroc(&outcomes)?, roc.roc.len(), trapezoid(&roc.roc));
    println!("AUPRC {:.4}", auprc(&outcomes)?);
    let ci = bootstrap_ci(&outcomes, auroc, 2000, 42)?;
    println!("AUROC 95% CI [{:.3}, {:.3}] from {} resamples ({} single-class skipped)", ci.lo, ci.hi, ci.resamples, ci.skipped);
    Ok(())
}
