use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{auprc, auroc, bootstrap_ci, Interval, MetricError, ScoredOutcome};
use crate::agents::PredictionResult;

/// Strata tags derived from a prediction: `age_band` (decade at cutoff),
/// `sex`, `cancer_type`, and `visit_quartile` (Q1..Q4 of visit counts
/// within the batch).
pub fn outcomes_from_predictions(preds: &[PredictionResult]) -> Vec<ScoredOutcome> {
    let mut visits: Vec<usize> = preds.iter().map(|p| p.meta.visit_count).collect();
    visits.sort_unstable();
    let quartile = |v: usize| {
        // share of the batch with strictly fewer visits
        let below = visits.partition_point(|&x| x < v);
        1 + (4 * below / visits.len().max(1)).min(3)
    };
    preds
        .iter()
        .map(|p| {
            let decade = p.meta.age_at_cutoff.max(0) / 10 * 10;
            let mut o = ScoredOutcome::new(p.patient_id.clone(), p.score, p.label);
            o.strata.insert("age_band".into(), format!("{decade}-{}", decade + 9));
            o.strata.insert("sex".into(), p.meta.sex.as_str().into());
            o.strata.insert("cancer_type".into(), p.cancer_type.clone());
            o.strata
                .insert("visit_quartile".into(), format!("Q{}", quartile(p.meta.visit_count)));
            o
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub n_positive: usize,
    pub auroc: Option<f64>,
    pub auroc_ci: Option<Interval>,
    pub auprc: Option<f64>,
    pub auprc_ci: Option<Interval>,
    /// Why a metric is missing, e.g. a single-class stratum.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricSummary,
    /// stratum key → stratum value → metrics
    pub strata: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    pub n_boot: usize,
    pub seed: u64,
}

fn summarize(outcomes: &[ScoredOutcome], n_boot: usize, seed: u64) -> MetricSummary {
    type Metric = fn(&[ScoredOutcome]) -> Result<f64, MetricError>;
    let mut notes = Vec::new();
    let mut run = |name: &str, metric: Metric| -> (Option<f64>, Option<Interval>) {
        let point = match metric(outcomes) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                return (None, None);
            }
        };
        if n_boot == 0 {
            return (Some(point), None);
        }
        match bootstrap_ci(outcomes, metric, n_boot, seed) {
            Ok(ci) => (Some(point), Some(ci)),
            Err(e) => {
                notes.push(format!("{name} interval: {e}"));
                (Some(point), None)
            }
        }
    };
    let (auroc, auroc_ci) = run("auroc", auroc);
    let (auprc, auprc_ci) = run("auprc", auprc);
    MetricSummary {
        n: outcomes.len(),
        n_positive: outcomes.iter().filter(|o| o.label == 1).count(),
        auroc,
        auroc_ci,
        auprc,
        auprc_ci,
        notes,
    }
}

/// Overall metrics plus a group-by over each requested stratum key.
pub fn evaluate(outcomes: &[ScoredOutcome], strata_keys: &[String], n_boot: usize, seed: u64) -> EvalReport {
    let mut strata = BTreeMap::new();
    for key in strata_keys {
        let mut groups: BTreeMap<String, Vec<ScoredOutcome>> = BTreeMap::new();
        for o in outcomes {
            let v = o.strata.get(key).cloned().unwrap_or_else(|| "unknown".into());
            groups.entry(v).or_default().push(o.clone());
        }
        let per: BTreeMap<String, MetricSummary> = groups
            .into_iter()
            .map(|(v, g)| (v, summarize(&g, n_boot, seed)))
            .collect();
        strata.insert(key.clone(), per);
    }
    EvalReport {
        overall: summarize(outcomes, n_boot, seed),
        strata,
        n_boot,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_report() {
        let mut os = Vec::new();
        for i in 0..40 {
            let label = (i % 2) as u8;
            let mut o = ScoredOutcome::new(format!("p{i}"), if label == 1 { 0.8 } else { 0.2 } + (i as f64) / 1000.0, label);
            o.strata.insert("sex".into(), if i < 20 { "female" } else { "male" }.into());
            os.push(o);
        }
        os.push({
            let mut o = ScoredOutcome::new("lonely", 0.5, 1);
            o.strata.insert("sex".into(), "other".into());
            o
        });
        let r = evaluate(&os, &["sex".into()], 100, 3);
        assert_eq!(r.overall.n, 41);
        assert!(r.overall.auroc.unwrap() > 0.95);
        let ci = r.overall.auroc_ci.unwrap();
        assert!(ci.lo <= r.overall.auroc.unwrap() && r.overall.auroc.unwrap() <= ci.hi);
        let other = &r.strata["sex"]["other"];
        assert!(other.auroc.is_none() && !other.notes.is_empty());
        assert_eq!(r.strata["sex"]["female"].n, 20);
    }
}
