use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub patient_id: String,
    pub score: f64,
    pub label: u8,
    #[serde(default)]
    pub strata: BTreeMap<String, String>,
}

impl ScoredOutcome {
    pub fn new(patient_id: impl Into<String>, score: f64, label: u8) -> Self {
        Self {
            patient_id: patient_id.into(),
            score,
            label,
            strata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least one positive and one negative outcome")]
    SingleClass,
    #[error("need at least one positive outcome")]
    NoPositives,
    #[error("score of {0} is not finite")]
    NonFinite(String),
    #[error("label of {0} is not 0 or 1")]
    BadLabel(String),
    #[error("{skipped} of {total} bootstrap resamples had a single class")]
    TooManySkipped { skipped: usize, total: usize },
}

fn check(outcomes: &[ScoredOutcome]) -> Result<(usize, usize), MetricError> {
    let mut pos = 0;
    for o in outcomes {
        if !o.score.is_finite() {
            return Err(MetricError::NonFinite(o.patient_id.clone()));
        }
        match o.label {
            0 => {}
            1 => pos += 1,
            _ => return Err(MetricError::BadLabel(o.patient_id.clone())),
        }
    }
    Ok((pos, outcomes.len() - pos))
}

/// Distinct thresholds, descending, with the positive and negative counts
/// scored exactly at each.
fn tied_groups(outcomes: &[ScoredOutcome]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, u8)> = outcomes.iter().map(|o| (o.score, o.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, l) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if l == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(l == 1), usize::from(l != 1))),
        }
    }
    groups
}

/// Mann-Whitney AUROC: the share of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = check(outcomes)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // walk thresholds from high to low: positives in a group beat every
    // negative below and tie with the negatives inside the group
    let mut twice_concordant: u128 = 0;
    let mut neg_above: usize = 0;
    let groups = tied_groups(outcomes);
    let neg_total = n_neg;
    for &(_, p, n) in &groups {
        let neg_below = neg_total - neg_above - n;
        twice_concordant += (2 * p * neg_below + p * n) as u128;
        neg_above += n;
    }
    Ok(twice_concordant as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Average precision with step interpolation: `Σ (R_k − R_{k−1}) · P_k`
/// over distinct thresholds, tied scores entering together.
pub fn auprc(outcomes: &[ScoredOutcome]) -> Result<f64, MetricError> {
    let (n_pos, _) = check(outcomes)?;
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut fp, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    for (_, p, n) in tied_groups(outcomes) {
        tp += p;
        fp += n;
        let recall = tp as f64 / n_pos as f64;
        area += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Scores at or above this value are called positive; `+inf` for the
    /// origin point.
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// `(FPR, TPR)` from (0, 0) to (1, 1).
    pub roc: Vec<CurvePoint>,
    /// `(recall, precision)` at each distinct threshold.
    pub pr: Vec<CurvePoint>,
}

pub fn curves(outcomes: &[ScoredOutcome]) -> Result<Curves, MetricError> {
    let (n_pos, n_neg) = check(outcomes)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut roc = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (t, p, n) in tied_groups(outcomes) {
        tp += p;
        fp += n;
        roc.push(CurvePoint {
            threshold: t,
            x: fp as f64 / n_neg as f64,
            y: tp as f64 / n_pos as f64,
        });
        pr.push(CurvePoint {
            threshold: t,
            x: tp as f64 / n_pos as f64,
            y: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(Curves { roc, pr })
}

/// Trapezoid area under a polyline of points sorted by `x`.
pub fn trapezoid(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].y + w[1].y) / 2.0)
        .sum()
}

/// CSV with columns `curve,threshold,x,y`.
pub fn write_curves_csv<W: Write>(c: &Curves, w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["curve", "threshold", "x", "y"])?;
    for (name, pts) in [("roc", &c.roc), ("pr", &c.pr)] {
        for p in pts {
            wr.write_record([name.to_string(), p.threshold.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub skipped: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    match sorted.get(i + 1) {
        Some(next) => sorted[i] + (next - sorted[i]) * frac,
        None => sorted[i],
    }
}

/// Percentile bootstrap 95% interval over patients. Single-class resamples
/// are skipped; more than half skipped is an error.
pub fn bootstrap_ci(
    outcomes: &[ScoredOutcome],
    metric: impl Fn(&[ScoredOutcome]) -> Result<f64, MetricError>,
    n_boot: usize,
    seed: u64,
) -> Result<Interval, MetricError> {
    metric(outcomes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut skipped = 0;
    let mut sample = Vec::with_capacity(outcomes.len());
    for _ in 0..n_boot {
        sample.clear();
        for _ in 0..outcomes.len() {
            sample.push(outcomes[rng.gen_range(0..outcomes.len())].clone());
        }
        match metric(&sample) {
            Ok(v) => values.push(v),
            Err(MetricError::SingleClass | MetricError::NoPositives) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() || skipped * 2 > n_boot {
        return Err(MetricError::TooManySkipped { skipped, total: n_boot });
    }
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        lo: quantile(&values, 0.025),
        hi: quantile(&values, 0.975),
        resamples: values.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn outs(pos: &[f64], neg: &[f64]) -> Vec<ScoredOutcome> {
        pos.iter()
            .map(|&s| (s, 1))
            .chain(neg.iter().map(|&s| (s, 0)))
            .enumerate()
            .map(|(i, (s, l))| ScoredOutcome::new(format!("p{i}"), s, l))
            .collect()
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&outs(&[0.9, 0.8], &[0.3, 0.2])).unwrap(), 1.0);
        assert_eq!(auroc(&outs(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auroc(&outs(&[0.2, 0.4], &[0.8, 0.6])).unwrap(), 0.0);
        assert_eq!(auroc(&outs(&[0.6, 0.5], &[0.5, 0.2])).unwrap(), 0.875);
        assert_eq!(auroc(&outs(&[0.5], &[])), Err(MetricError::SingleClass));
    }

    #[test]
    fn auprc_hand_cases() {
        assert_eq!(auprc(&outs(&[0.9, 0.8], &[0.3, 0.2])).unwrap(), 1.0);
        assert_eq!(auprc(&outs(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        // thresholds 0.9 (R .5, P 1), 0.6 (R .5, P .5), 0.4 (R 1, P 2/3)
        assert_relative_eq!(auprc(&outs(&[0.9, 0.4], &[0.6])).unwrap(), 0.5 + 0.5 * 2.0 / 3.0);
        assert_eq!(auprc(&outs(&[], &[0.1])), Err(MetricError::NoPositives));
    }

    #[test]
    fn roc_shapes() {
        let c = curves(&outs(&[0.9, 0.8], &[0.3, 0.2])).unwrap();
        assert!(c.roc.iter().any(|p| p.x == 0.0 && p.y == 1.0));
        let ties = curves(&outs(&[0.5], &[0.5])).unwrap();
        let xy: Vec<(f64, f64)> = ties.roc.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(xy, [(0.0, 0.0), (1.0, 1.0)]);
        let o = outs(&[0.6, 0.5, 0.3], &[0.5, 0.2, 0.4]);
        assert_relative_eq!(trapezoid(&curves(&o).unwrap().roc), auroc(&o).unwrap(), epsilon = 1e-12);
        let mut buf = Vec::new();
        write_curves_csv(&c, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("curve,threshold,x,y\nroc,inf,0,0\n"));
    }

    #[test]
    fn bootstrap_behaviour() {
        let perfect = outs(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]);
        let ci = bootstrap_ci(&perfect, auroc, 200, 1).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
        assert_eq!(ci, bootstrap_ci(&perfect, auroc, 200, 1).unwrap());
        // a metric that only the full sample satisfies
        let calls = std::cell::Cell::new(0);
        let picky = |_: &[ScoredOutcome]| {
            calls.set(calls.get() + 1);
            if calls.get() == 1 {
                Ok(1.0)
            } else {
                Err(MetricError::SingleClass)
            }
        };
        assert_eq!(
            bootstrap_ci(&perfect, picky, 10, 1),
            Err(MetricError::TooManySkipped { skipped: 10, total: 10 })
        );
    }
}
