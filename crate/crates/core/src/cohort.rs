//! Case-control cohort construction.
//!
//! A case has an incident diagnosis: two code-set conditions 0 < Δ ≤ 61 days
//! apart with no code-set condition in the 183 days before the first. Its
//! index date is the first code of the earliest such pair. Controls get an
//! index date sampled from their own visit dates. Both keep only events
//! strictly before `index − gap` and need at least two remaining visits.
//! Controls are matched to cases by sex and age decade.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{ClinicalEvent, Cohort, Modality, PatientRecord, Sex};
use crate::util::{age_years, derive_seed, sub_years};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhenotypeConfig {
    pub code_set: BTreeSet<String>,
    pub pair_window_days: i64,
    pub washout_days: i64,
    pub gap_years: f64,
    pub min_visits: usize,
}

impl Default for PhenotypeConfig {
    fn default() -> Self {
        Self {
            code_set: BTreeSet::new(),
            pair_window_days: 61,
            washout_days: 183,
            gap_years: 1.0,
            min_visits: 2,
        }
    }
}

impl PhenotypeConfig {
    pub fn with_codes<I: IntoIterator<Item = S>, S: Into<String>>(codes: I) -> Self {
        Self {
            code_set: codes.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("control pool is empty")]
    EmptyPool,
    #[error("reading code set {path}: {source}")]
    Codes {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Newline-delimited code set; blank lines and `#` comments are ignored.
pub fn read_code_set(path: &Path) -> Result<BTreeSet<String>, CohortError> {
    let text = std::fs::read_to_string(path).map_err(|source| CohortError::Codes {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Dates of condition events whose code is in the code set, ascending.
pub fn code_dates(events: &[ClinicalEvent], cfg: &PhenotypeConfig) -> Vec<NaiveDate> {
    let mut d: Vec<NaiveDate> = events
        .iter()
        .filter(|e| e.modality == Modality::Condition)
        .filter(|e| e.code().is_some_and(|c| cfg.code_set.contains(c.trim())))
        .map(ClinicalEvent::date)
        .collect();
    d.sort();
    d
}

/// First date of the earliest qualifying code pair, if any.
pub fn find_incident_diagnosis(events: &[ClinicalEvent], cfg: &PhenotypeConfig) -> Option<NaiveDate> {
    let dates = code_dates(events, cfg);
    for (i, &first) in dates.iter().enumerate() {
        let prior = dates[..i].iter().rev().find(|&&d| d < first);
        if prior.is_some_and(|&d| (first - d).num_days() <= cfg.washout_days) {
            continue;
        }
        let paired = dates[i + 1..].iter().any(|&d| {
            let delta = (d - first).num_days();
            delta > 0 && delta <= cfg.pair_window_days
        });
        if paired {
            return Some(first);
        }
    }
    None
}

fn cut(record: &PatientRecord, index_date: NaiveDate, label: u8, cfg: &PhenotypeConfig) -> Option<PatientRecord> {
    let cutoff = sub_years(index_date, cfg.gap_years);
    let events: Vec<ClinicalEvent> = record
        .events
        .iter()
        .filter(|e| e.date() < cutoff)
        .cloned()
        .collect();
    let out = PatientRecord {
        patient_id: record.patient_id.clone(),
        demographics: record.demographics.clone(),
        index_date,
        label,
        gap_years: cfg.gap_years,
        events,
    };
    (out.visit_count() >= cfg.min_visits).then_some(out)
}

/// Case record cut at `diagnosis_date − gap`, or `None` with too few visits.
pub fn build_case(record: &PatientRecord, diagnosis_date: NaiveDate, cfg: &PhenotypeConfig) -> Option<PatientRecord> {
    cut(record, diagnosis_date, 1, cfg)
}

/// Visit dates that, used as index date, leave at least `min_visits` visits.
pub fn control_index_candidates(record: &PatientRecord, cfg: &PhenotypeConfig) -> Vec<NaiveDate> {
    let visits = record.visit_dates();
    visits
        .iter()
        .copied()
        .filter(|&d| {
            let cutoff = sub_years(d, cfg.gap_years);
            visits.iter().filter(|&&v| v < cutoff).count() >= cfg.min_visits
        })
        .collect()
}

/// Control record with an index date drawn uniformly from the qualifying
/// visit dates. Records with an incident diagnosis are rejected.
pub fn build_control(record: &PatientRecord, seed: u64, cfg: &PhenotypeConfig) -> Option<PatientRecord> {
    if find_incident_diagnosis(&record.events, cfg).is_some() {
        return None;
    }
    let candidates = control_index_candidates(record, cfg);
    if candidates.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "control-index", &record.patient_id));
    let index = candidates[rng.gen_range(0..candidates.len())];
    cut(record, index, 0, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatchKey {
    pub sex: Sex,
    pub age_decade: i32,
}

impl MatchKey {
    pub fn of(record: &PatientRecord) -> Self {
        Self {
            sex: record.demographics.sex,
            age_decade: age_years(record.demographics.birth_date, record.index_date)
                .max(0)
                .div_euclid(10),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Matching {
    pub cohort: Cohort,
    /// Cases without enough same-key controls left in the pool.
    pub dropped_cases: Vec<String>,
}

/// Sample `ratio` distinct same-key controls per case, without replacement.
/// Cases are visited in patient-id order so the result depends only on the
/// inputs and `seed`.
pub fn match_controls(
    cases: Vec<PatientRecord>,
    pool: Vec<PatientRecord>,
    seed: u64,
    ratio: usize,
    cancer_type: &str,
    gap_years: f64,
) -> Result<Matching, CohortError> {
    if pool.is_empty() {
        return Err(CohortError::EmptyPool);
    }
    let ratio = ratio.max(1);
    let mut by_key: BTreeMap<MatchKey, Vec<PatientRecord>> = BTreeMap::new();
    let mut pool = pool;
    pool.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    for r in pool {
        by_key.entry(MatchKey::of(&r)).or_default().push(r);
    }
    let mut cases = cases;
    cases.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "match", ""));
    let mut kept = Vec::new();
    let mut controls = Vec::new();
    let mut dropped_cases = Vec::new();
    for case in cases {
        let bucket = by_key.entry(MatchKey::of(&case)).or_default();
        if bucket.len() < ratio {
            tracing::info!(patient = %case.patient_id, "no match available; case dropped");
            dropped_cases.push(case.patient_id);
            continue;
        }
        for _ in 0..ratio {
            let i = rng.gen_range(0..bucket.len());
            controls.push(bucket.remove(i));
        }
        kept.push(case);
    }
    Ok(Matching {
        cohort: Cohort {
            cancer_type: cancer_type.to_string(),
            cases: kept,
            controls,
            gap_years,
        },
        dropped_cases,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortReport {
    pub raw_records: usize,
    pub incident_cases: usize,
    pub cases_too_few_visits: usize,
    pub control_candidates: usize,
    pub controls_ineligible: usize,
    pub cases_unmatched: Vec<String>,
    pub cases: usize,
    pub controls: usize,
}

/// Phenotype every raw history, cut cases and controls, and match.
pub fn build_cohort(
    raw: &[PatientRecord],
    cfg: &PhenotypeConfig,
    cancer_type: &str,
    seed: u64,
    ratio: usize,
) -> Result<(Cohort, CohortReport), CohortError> {
    let mut report = CohortReport {
        raw_records: raw.len(),
        ..CohortReport::default()
    };
    let mut cases = Vec::new();
    let mut pool = Vec::new();
    for r in raw {
        match find_incident_diagnosis(&r.events, cfg) {
            Some(dx) => {
                report.incident_cases += 1;
                match build_case(r, dx, cfg) {
                    Some(c) => cases.push(c),
                    None => report.cases_too_few_visits += 1,
                }
            }
            None => {
                report.control_candidates += 1;
                match build_control(r, seed, cfg) {
                    Some(c) => pool.push(c),
                    None => report.controls_ineligible += 1,
                }
            }
        }
    }
    let m = match_controls(cases, pool, seed, ratio, cancer_type, cfg.gap_years)?;
    report.cases_unmatched = m.dropped_cases;
    report.cases = m.cohort.cases.len();
    report.controls = m.cohort.controls.len();
    Ok((m.cohort, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Demographics;

    fn day(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(n)
    }

    fn code_event(n: i64, code: &str) -> ClinicalEvent {
        ClinicalEvent::new(day(n).and_hms_opt(0, 0, 0).unwrap(), Modality::Condition).with("code", code)
    }

    fn other_event(date: NaiveDate) -> ClinicalEvent {
        ClinicalEvent::new(date.and_hms_opt(0, 0, 0).unwrap(), Modality::Observation).with("display", "bp")
    }

    fn cfg() -> PhenotypeConfig {
        PhenotypeConfig::with_codes(["C34"])
    }

    fn record(id: &str, sex: Sex, birth: NaiveDate, events: Vec<ClinicalEvent>) -> PatientRecord {
        let mut r = PatientRecord {
            patient_id: id.into(),
            demographics: Demographics {
                birth_date: birth,
                sex,
                ethnicity: "e".into(),
                race: "r".into(),
            },
            index_date: events.last().map_or(day(0), |e| e.date()),
            label: 0,
            gap_years: 0.0,
            events,
        };
        r.sort_events();
        r
    }

    #[test]
    fn pair_rules() {
        let c = cfg();
        assert_eq!(find_incident_diagnosis(&[code_event(0, "C34"), code_event(45, "C34")], &c), Some(day(0)));
        assert_eq!(find_incident_diagnosis(&[code_event(0, "C34"), code_event(90, "C34")], &c), None);
        assert_eq!(
            find_incident_diagnosis(&[code_event(-100, "C34"), code_event(0, "C34"), code_event(30, "C34")], &c),
            None
        );
        // same-day codes count as one encounter
        assert_eq!(find_incident_diagnosis(&[code_event(0, "C34"), code_event(0, "C34")], &c), None);
        // codes outside the set are ignored
        assert_eq!(find_incident_diagnosis(&[code_event(0, "X"), code_event(10, "X")], &c), None);
        // a clean gap longer than the washout re-qualifies
        assert_eq!(
            find_incident_diagnosis(&[code_event(-200, "C34"), code_event(0, "C34"), code_event(30, "C34")], &c),
            Some(day(0))
        );
    }

    #[test]
    fn case_cut_and_gap_variants() {
        let dx = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        let mk = |s: &str| other_event(NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap());
        let r = record(
            "a",
            Sex::Female,
            day(-20000),
            vec![mk("2018-01-01"), mk("2019-01-01"), mk("2019-06-01"), mk("2019-07-01"), mk("2019-12-15")],
        );
        let c = build_case(&r, dx, &cfg()).unwrap();
        assert_eq!(c.cutoff(), NaiveDate::from_ymd_opt(2019, 6, 1).unwrap());
        assert_eq!(c.events.len(), 2);
        assert!(c.events.iter().all(|e| e.date() < c.cutoff()));
        let half = PhenotypeConfig { gap_years: 0.5, ..cfg() };
        let c = build_case(&r, dx, &half).unwrap();
        assert_eq!(c.cutoff(), NaiveDate::from_ymd_opt(2019, 12, 1).unwrap());
        assert_eq!(c.events.len(), 4);
        let one_visit = record("b", Sex::Female, day(-20000), vec![mk("2018-01-01"), mk("2020-01-01")]);
        assert!(build_case(&one_visit, dx, &cfg()).is_none());
    }

    #[test]
    fn control_sampling() {
        let visits: Vec<ClinicalEvent> = (0..6).map(|i| other_event(day(i * 200))).collect();
        let r = record("c", Sex::Male, day(-20000), visits);
        let a = build_control(&r, 7, &cfg()).unwrap();
        let b = build_control(&r, 7, &cfg()).unwrap();
        assert_eq!(a, b);
        assert!(control_index_candidates(&r, &cfg()).contains(&a.index_date));
        assert!(a.visit_count() >= 2);

        let short = record("d", Sex::Male, day(-20000), vec![other_event(day(0)), other_event(day(30))]);
        assert!(control_index_candidates(&short, &cfg()).is_empty());
        assert!(build_control(&short, 7, &cfg()).is_none());

        let mut with_dx = r.clone();
        with_dx.events.push(code_event(1100, "C34"));
        with_dx.events.push(code_event(1120, "C34"));
        assert!(build_control(&with_dx, 7, &cfg()).is_none());
    }

    fn indexed(id: &str, sex: Sex, age: i32) -> PatientRecord {
        let idx = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mut r = record(id, sex, NaiveDate::from_ymd_opt(2020 - age, 1, 1).unwrap(), vec![other_event(day(-800))]);
        r.index_date = idx;
        r
    }

    #[test]
    fn matching() {
        let cases = vec![indexed("k1", Sex::Female, 64), indexed("k2", Sex::Female, 61), indexed("k3", Sex::Male, 85)];
        let pool = vec![
            indexed("p1", Sex::Female, 60),
            indexed("p2", Sex::Female, 69),
            indexed("p3", Sex::Female, 65),
            indexed("p4", Sex::Male, 70),
        ];
        let m = match_controls(cases.clone(), pool.clone(), 3, 1, "x", 1.0).unwrap();
        assert_eq!(m.dropped_cases, ["k3"]);
        assert_eq!(m.cohort.cases.len(), m.cohort.controls.len());
        let ids: BTreeSet<_> = m.cohort.controls.iter().map(|c| c.patient_id.clone()).collect();
        assert_eq!(ids.len(), 2);
        for (c, k) in m.cohort.cases.iter().zip(&m.cohort.controls) {
            assert_eq!(MatchKey::of(c), MatchKey::of(k));
        }
        let again = match_controls(cases.clone(), pool, 3, 1, "x", 1.0).unwrap();
        assert_eq!(again.cohort, m.cohort);
        assert!(matches!(match_controls(cases, vec![], 3, 1, "x", 1.0), Err(CohortError::EmptyPool)));
    }
}
