//! Seeded synthetic cohorts with a planted signal.
//!
//! Cases get a qualifying diagnosis-code pair after their prediction cutoff
//! and, with probability `p_case` per marker, a marker event before it.
//! Controls have no codes, leak markers with probability `p_control`, and
//! copy the sex and age decade of a case so 1:1 matching succeeds. Paired
//! with [`marker_policy_script`], the generated data gives the pipeline a
//! known ground truth to recover.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::policy::Policy;
use crate::llm::{Matcher, Reply, Script};
use crate::record::{ClinicalEvent, Demographics, Modality, PatientRecord, Sex};
use crate::util::{derive_seed, sub_years};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub text: String,
    pub p_case: f64,
    pub p_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabItem {
    pub modality: Modality,
    pub display: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub n_controls: usize,
    pub seed: u64,
    /// Length of each history in years; must stay below `10 - gap_years`
    /// so a control fits inside one age decade.
    pub years_span: f64,
    /// Mean visits per year (Poisson arrivals).
    pub events_per_year: f64,
    /// Background events per visit, drawn uniformly from this range.
    pub events_per_visit: (usize, usize),
    pub gap_years: f64,
    pub cancer_type: String,
    pub diagnosis_codes: Vec<String>,
    pub marker_events: Vec<MarkerSpec>,
    pub vocab: Vec<VocabItem>,
    pub age_range: (i32, i32),
    /// Diagnosis and control end dates fall in this range.
    pub date_range: (NaiveDate, NaiveDate),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 100,
            n_controls: 100,
            seed: 1,
            years_span: 6.0,
            events_per_year: 5.0,
            events_per_visit: (1, 3),
            gap_years: 1.0,
            cancer_type: "lung cancer".into(),
            diagnosis_codes: vec!["C34.90".into(), "C34.11".into()],
            marker_events: vec![
                MarkerSpec {
                    text: "multiple pulmonary nodules".into(),
                    p_case: 0.9,
                    p_control: 0.05,
                },
                MarkerSpec {
                    text: "active smoking".into(),
                    p_case: 0.9,
                    p_control: 0.05,
                },
                MarkerSpec {
                    text: "hemoptysis".into(),
                    p_case: 0.9,
                    p_control: 0.05,
                },
            ],
            vocab: default_vocab(),
            age_range: (45, 84),
            date_range: (
                NaiveDate::from_ymd_opt(2016, 1, 1).expect("date"),
                NaiveDate::from_ymd_opt(2023, 12, 31).expect("date"),
            ),
        }
    }
}

fn v(modality: Modality, display: &str, code: Option<&str>, unit: Option<&str>) -> VocabItem {
    VocabItem {
        modality,
        display: display.into(),
        code: code.map(Into::into),
        unit: unit.map(Into::into),
    }
}

pub fn default_vocab() -> Vec<VocabItem> {
    use Modality::*;
    vec![
        v(Condition, "Essential hypertension", Some("I10"), None),
        v(Condition, "Type 2 diabetes mellitus", Some("E11.9"), None),
        v(Condition, "Hyperlipidemia", Some("E78.5"), None),
        v(Condition, "Gastro-esophageal reflux disease", Some("K21.9"), None),
        v(Condition, "Low back pain", Some("M54.5"), None),
        v(Condition, "Acute upper respiratory infection", Some("J06.9"), None),
        v(Observation, "Body mass index", None, Some("kg/m2")),
        v(Observation, "Systolic blood pressure", None, Some("mm[Hg]")),
        v(Observation, "Heart rate", None, Some("/min")),
        v(LabResult, "Hemoglobin A1c", None, Some("%")),
        v(LabResult, "Creatinine", None, Some("mg/dL")),
        v(LabResult, "LDL cholesterol", None, Some("mg/dL")),
        v(LabResult, "Hemoglobin", None, Some("g/dL")),
        v(Medication, "lisinopril 10 MG oral tablet", Some("314076"), None),
        v(Medication, "metformin 500 MG oral tablet", Some("861007"), None),
        v(Medication, "atorvastatin 20 MG oral tablet", Some("617312"), None),
        v(Procedure, "Influenza vaccination", Some("90686"), None),
        v(Procedure, "Office visit, established patient", Some("99213"), None),
    ]
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Invalid(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.events_per_year <= 0.0 || self.years_span <= 0.0 {
            return bad("rates and spans must be positive");
        }
        if self.years_span - self.gap_years >= 9.0 {
            return bad("years_span - gap_years must be below 9 so controls fit in one age decade");
        }
        if self.years_span <= self.gap_years {
            return bad("years_span must exceed gap_years");
        }
        if self
            .marker_events
            .iter()
            .any(|m| !(0.0..=1.0).contains(&m.p_case) || !(0.0..=1.0).contains(&m.p_control))
        {
            return bad("marker probabilities must lie in [0, 1]");
        }
        if self.diagnosis_codes.is_empty() {
            return bad("diagnosis_codes is empty");
        }
        if self.vocab.is_empty() {
            return bad("vocab is empty");
        }
        if self.n_cases > 0 && self.n_controls > 0 && self.age_range.0 > self.age_range.1 {
            return bad("age_range is empty");
        }
        if self.date_range.0 > self.date_range.1 {
            return bad("date_range is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub label: u8,
    pub diagnosis_date: Option<NaiveDate>,
    pub markers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Raw histories, in patient-id order.
    pub records: Vec<PatientRecord>,
    pub answer_key: BTreeMap<String, KeyEntry>,
}

fn date_between(rng: &mut ChaCha8Rng, a: NaiveDate, b: NaiveDate) -> NaiveDate {
    a + Duration::days(rng.gen_range(0..=(b - a).num_days()))
}

fn years(y: f64) -> Duration {
    Duration::days((y * 365.25).round() as i64)
}

/// Visit days between `start` and `end` with exponential gaps.
fn visit_days(rng: &mut ChaCha8Rng, start: NaiveDate, end: NaiveDate, rate: f64) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut t = start;
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let gap = (-u.ln() / rate * 365.25).ceil().max(1.0) as i64;
        t += Duration::days(gap);
        if t > end {
            break;
        }
        out.push(t);
    }
    out
}

fn background(rng: &mut ChaCha8Rng, cfg: &SynthConfig, date: NaiveDate) -> ClinicalEvent {
    let item = &cfg.vocab[rng.gen_range(0..cfg.vocab.len())];
    let mut e = ClinicalEvent::new(date.and_hms_opt(0, 0, 0).expect("midnight"), item.modality).with("display", &item.display);
    if let Some(c) = &item.code {
        e = e.with("code", c);
    }
    if matches!(item.modality, Modality::LabResult | Modality::Observation) {
        e = e.with("value", format!("{:.1}", rng.gen_range(1.0..150.0)));
    }
    if let Some(u) = &item.unit {
        e = e.with("unit", u);
    }
    e
}

fn marker_event(date: NaiveDate, text: &str) -> ClinicalEvent {
    ClinicalEvent::new(date.and_hms_opt(0, 0, 0).expect("midnight"), Modality::Observation).with("display", text)
}

struct Draft {
    sex: Sex,
    birth: NaiveDate,
    events: Vec<ClinicalEvent>,
    key: KeyEntry,
}

fn fill_visits(rng: &mut ChaCha8Rng, cfg: &SynthConfig, days: &[NaiveDate]) -> Vec<ClinicalEvent> {
    let (lo, hi) = cfg.events_per_visit;
    let mut out = Vec::new();
    for &d in days {
        for _ in 0..rng.gen_range(lo.max(1)..=hi.max(lo.max(1))) {
            out.push(background(rng, cfg, d));
        }
    }
    out
}

/// Pre-cutoff visits, padded so at least three exist.
fn history(rng: &mut ChaCha8Rng, cfg: &SynthConfig, start: NaiveDate, end: NaiveDate, cutoff: NaiveDate) -> Vec<NaiveDate> {
    let mut days = visit_days(rng, start, end, cfg.events_per_year);
    while days.iter().filter(|&&d| d < cutoff).count() < 3 {
        days.push(date_between(rng, start, cutoff - Duration::days(1)));
        days.sort();
        days.dedup();
    }
    days
}

fn case(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Draft {
    let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
    let age = rng.gen_range(cfg.age_range.0..=cfg.age_range.1);
    let dx = date_between(rng, cfg.date_range.0, cfg.date_range.1);
    let birth = dx - years(f64::from(age)) - Duration::days(rng.gen_range(30..330));
    let cutoff = sub_years(dx, cfg.gap_years);
    let start = dx - years(cfg.years_span);
    let days = history(rng, cfg, start, dx + Duration::days(90), cutoff);
    let mut events = fill_visits(rng, cfg, &days);
    let pre: Vec<NaiveDate> = days.iter().copied().filter(|&d| d < cutoff).collect();
    let mut markers = Vec::new();
    for m in &cfg.marker_events {
        if rng.gen_bool(m.p_case) {
            events.push(marker_event(pre[rng.gen_range(0..pre.len())], &m.text));
            markers.push(m.text.clone());
        }
    }
    let code = |rng: &mut ChaCha8Rng| cfg.diagnosis_codes[rng.gen_range(0..cfg.diagnosis_codes.len())].clone();
    let second = dx + Duration::days(rng.gen_range(20..=50));
    for d in [dx, second] {
        let c = code(rng);
        events.push(
            ClinicalEvent::new(d.and_hms_opt(0, 0, 0).expect("midnight"), Modality::Condition)
                .with("code", c)
                .with("display", format!("Malignant neoplasm ({})", cfg.cancer_type)),
        );
    }
    Draft {
        sex,
        birth,
        events,
        key: KeyEntry {
            label: 1,
            diagnosis_date: Some(dx),
            markers,
        },
    }
}

fn control(rng: &mut ChaCha8Rng, cfg: &SynthConfig, sex: Sex, decade: i32) -> Draft {
    let end = date_between(rng, cfg.date_range.0, cfg.date_range.1);
    let start = end - years(cfg.years_span);
    // every candidate index date lies in [start + gap, end]; keep those ages
    // inside the decade with a two-month margin on both sides
    let window = cfg.years_span - cfg.gap_years;
    let lo = f64::from(decade * 10) + window + 0.17;
    let hi = f64::from(decade * 10) + 9.83;
    let age_at_end = rng.gen_range(lo..=hi.max(lo));
    let birth = end - years(age_at_end);
    let days = history(rng, cfg, start, end, end - years(cfg.gap_years));
    let mut events = fill_visits(rng, cfg, &days);
    let mut markers = Vec::new();
    for m in &cfg.marker_events {
        if rng.gen_bool(m.p_control) {
            events.push(marker_event(days[rng.gen_range(0..days.len())], &m.text));
            markers.push(m.text.clone());
        }
    }
    Draft {
        sex,
        birth,
        events,
        key: KeyEntry {
            label: 0,
            diagnosis_date: None,
            markers,
        },
    }
}

/// Generate raw histories and the answer key. Identical configs give
/// identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth", ""));
    let mut drafts = Vec::with_capacity(cfg.n_cases + cfg.n_controls);
    for _ in 0..cfg.n_cases {
        drafts.push(case(&mut rng, cfg));
    }
    for j in 0..cfg.n_controls {
        let (sex, decade) = match drafts.get(j % cfg.n_cases.max(1)) {
            Some(c) if cfg.n_cases > 0 => {
                let dx = c.key.diagnosis_date.expect("case");
                (c.sex, crate::util::age_years(c.birth, dx) / 10)
            }
            _ => (
                if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male },
                rng.gen_range(cfg.age_range.0..=cfg.age_range.1) / 10,
            ),
        };
        drafts.push(control(&mut rng, cfg, sex, decade));
    }
    let mut ids: Vec<usize> = (1..=drafts.len()).collect();
    ids.shuffle(&mut rng);
    let width = drafts.len().to_string().len().max(4);
    let mut records = Vec::with_capacity(drafts.len());
    let mut answer_key = BTreeMap::new();
    for (d, n) in drafts.into_iter().zip(ids) {
        let patient_id = format!("P{n:0width$}");
        let mut r = PatientRecord {
            patient_id: patient_id.clone(),
            demographics: Demographics {
                birth_date: d.birth,
                sex: d.sex,
                ethnicity: if rng.gen_bool(0.15) { "Hispanic or Latino" } else { "Not Hispanic or Latino" }.into(),
                race: ["White", "Black or African American", "Asian", "Other"][rng.gen_range(0..4)].into(),
            },
            index_date: d.birth,
            label: 0,
            gap_years: 0.0,
            events: d.events,
        };
        r.sort_events();
        r.index_date = r.events.last().map_or(r.index_date, ClinicalEvent::date);
        records.push(r);
        answer_key.insert(patient_id, d.key);
    }
    records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(SynthOutput { records, answer_key })
}

/// Strict script answering every agent request with the marker policy.
pub fn marker_policy_script(cfg: &SynthConfig) -> Script {
    Script::new(true).entry(
        Matcher::any(),
        Reply::policy(Policy::Marker {
            markers: cfg.marker_events.iter().map(|m| m.text.clone()).collect(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{build_cohort, PhenotypeConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_cases: 20,
            n_controls: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.answer_key, b.answer_key);
    }

    #[test]
    fn probability_extremes() {
        let mut cfg = small();
        for m in &mut cfg.marker_events {
            m.p_case = 1.0;
            m.p_control = 0.0;
        }
        let out = generate(&cfg).unwrap();
        for r in &out.records {
            let has = r.events.iter().any(|e| {
                cfg.marker_events
                    .iter()
                    .any(|m| e.payload.get("display") == Some(&m.text))
            });
            assert_eq!(has, out.answer_key[&r.patient_id].label == 1, "{}", r.patient_id);
        }
    }

    #[test]
    fn phenotyper_recovers_answer_key() {
        let cfg = small();
        let out = generate(&cfg).unwrap();
        let pcfg = PhenotypeConfig::with_codes(cfg.diagnosis_codes.clone());
        let (cohort, report) = build_cohort(&out.records, &pcfg, &cfg.cancer_type, 7, 1).unwrap();
        assert_eq!(report.incident_cases, cfg.n_cases);
        assert_eq!(cohort.cases.len(), cfg.n_cases, "{report:?}");
        assert_eq!(cohort.controls.len(), cfg.n_cases);
        for c in &cohort.cases {
            let k = &out.answer_key[&c.patient_id];
            assert_eq!(k.label, 1);
            assert_eq!(Some(c.index_date), k.diagnosis_date);
        }
        for c in &cohort.controls {
            assert_eq!(out.answer_key[&c.patient_id].label, 0);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            years_span: 12.0,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
