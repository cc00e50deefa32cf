use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::agents::{PredictionResult, RiskLevel3};
use crate::util::age_years;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskState {
    #[serde(rename = "no_record")]
    NoRecord,
    Low,
    Moderate,
    High,
    #[serde(rename = "diagnosis")]
    Diagnosis,
}

impl RiskState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoRecord => "no_record",
            Self::Low => "Low",
            Self::Moderate => "Moderate",
            Self::High => "High",
            Self::Diagnosis => "diagnosis",
        }
    }
}

impl From<RiskLevel3> for RiskState {
    fn from(r: RiskLevel3) -> Self {
        match r {
            RiskLevel3::Low => Self::Low,
            RiskLevel3::Moderate => Self::Moderate,
            RiskLevel3::High => Self::High,
        }
    }
}

/// Half-open age interval `[lo, lo + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeBand {
    pub lo: i32,
    pub width: i32,
}

impl AgeBand {
    pub fn of(age: i32, width: i32) -> Self {
        Self {
            lo: age.div_euclid(width) * width,
            width,
        }
    }

    pub fn label(&self) -> String {
        format!("[{},{})", self.lo, self.lo + self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskTransition {
    pub age_band: AgeBand,
    pub from_state: RiskState,
    pub to_state: RiskState,
    pub count: usize,
}

/// One patient-level step, kept for inspecting the worker's rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDetail {
    pub patient_id: String,
    pub date: NaiveDate,
    pub age: i32,
    pub from_state: RiskState,
    pub to_state: RiskState,
    /// Reasoning of the worker that produced `to_state`; empty for the
    /// diagnosis step.
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub transitions: Vec<RiskTransition>,
    pub details: Vec<TransitionDetail>,
    pub patients: usize,
    pub skipped_missing_birth_date: usize,
}

/// Dated state sequence of one patient: `no_record` at record start, one
/// state per worker at its chunk's last visit, and `diagnosis` at the index
/// date for cases.
pub fn patient_states(p: &PredictionResult) -> Vec<(NaiveDate, RiskState, String)> {
    let start = p
        .meta
        .first_event
        .or_else(|| p.worker_trace.iter().find_map(|w| w.span.map(|s| s.0)))
        .unwrap_or(p.meta.cutoff);
    let mut states = vec![(start, RiskState::NoRecord, String::new())];
    let mut last = start;
    for w in &p.worker_trace {
        // a chunk without a parseable span inherits the previous date
        let date = w.span.map_or(last, |s| s.1);
        last = date;
        states.push((date, w.risk.into(), w.reasoning.clone()));
    }
    if p.label == 1 {
        states.push((p.meta.index_date, RiskState::Diagnosis, String::new()));
    }
    states
}

/// Birth dates as recorded in the predictions themselves.
pub fn birth_dates(preds: &[PredictionResult]) -> BTreeMap<String, NaiveDate> {
    preds.iter().map(|p| (p.patient_id.clone(), p.meta.birth_date)).collect()
}

/// Count state changes per age band, the age taken at the destination
/// state. Patients without a birth date in `births` are skipped.
pub fn aggregate_transitions(
    preds: &[PredictionResult],
    births: &BTreeMap<String, NaiveDate>,
    band_width_years: i32,
) -> TransitionTable {
    let width = band_width_years.max(1);
    let mut counts: BTreeMap<(AgeBand, RiskState, RiskState), usize> = BTreeMap::new();
    let mut details = Vec::new();
    let mut skipped = 0;
    let mut patients = 0;
    for p in preds {
        let Some(&birth) = births.get(&p.patient_id) else {
            skipped += 1;
            continue;
        };
        patients += 1;
        for pair in patient_states(p).windows(2) {
            let (from, (date, to, reasoning)) = (pair[0].1, &pair[1]);
            let age = age_years(birth, *date);
            *counts.entry((AgeBand::of(age, width), from, *to)).or_default() += 1;
            details.push(TransitionDetail {
                patient_id: p.patient_id.clone(),
                date: *date,
                age,
                from_state: from,
                to_state: *to,
                reasoning: reasoning.clone(),
            });
        }
    }
    TransitionTable {
        transitions: counts
            .into_iter()
            .map(|((age_band, from_state, to_state), count)| RiskTransition {
                age_band,
                from_state,
                to_state,
                count,
            })
            .collect(),
        details,
        patients,
        skipped_missing_birth_date: skipped,
    }
}

/// Sankey edge list with columns `age_band,from_state,to_state,count`.
pub fn write_transitions_csv<W: Write>(t: &[RiskTransition], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["age_band", "from_state", "to_state", "count"])?;
    for r in t {
        wr.write_record([r.age_band.label(), r.from_state.as_str().into(), r.to_state.as_str().into(), r.count.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-step detail with columns `patient_id,date,age,from_state,to_state,reasoning`.
pub fn write_details_csv<W: Write>(d: &[TransitionDetail], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["patient_id", "date", "age", "from_state", "to_state", "reasoning"])?;
    for r in d {
        wr.write_record([
            r.patient_id.clone(),
            r.date.to_string(),
            r.age.to_string(),
            r.from_state.as_str().into(),
            r.to_state.as_str().into(),
            r.reasoning.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands() {
        assert_eq!(AgeBand::of(64, 5).label(), "[60,65)");
        assert_eq!(AgeBand::of(65, 5).label(), "[65,70)");
        assert_eq!(AgeBand::of(7, 10).lo, 0);
    }
}
