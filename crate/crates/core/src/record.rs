//! Patient trajectories: events, demographics, records, cohorts, and
//! JSON-lines ingestion.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::tokens::TokenCounter;
use crate::util::{format_timestamp, parse_timestamp, sub_years};
use crate::xml;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Condition,
    Observation,
    LabResult,
    Medication,
    Procedure,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Condition,
        Modality::Observation,
        Modality::LabResult,
        Modality::Medication,
        Modality::Procedure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Condition => "condition",
            Modality::Observation => "observation",
            Modality::LabResult => "lab_result",
            Modality::Medication => "medication",
            Modality::Procedure => "procedure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Some(Sex::Female),
            "male" | "m" => Some(Sex::Male),
            _ => None,
        }
    }
}

/// One observation `(x_i, m_i, t_i)` of the trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    #[serde(serialize_with = "ser_ts", deserialize_with = "de_ts")]
    pub timestamp: NaiveDateTime,
    pub modality: Modality,
    pub payload: BTreeMap<String, String>,
}

impl ClinicalEvent {
    pub fn new(timestamp: NaiveDateTime, modality: Modality) -> Self {
        Self {
            timestamp,
            modality,
            payload: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    pub fn code(&self) -> Option<&str> {
        self.payload.get("code").map(String::as_str)
    }
}

fn ser_ts<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_timestamp(t))
}

fn de_ts<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
    let raw = String::deserialize(d)?;
    parse_timestamp(&raw).ok_or_else(|| serde::de::Error::custom(format!("invalid timestamp {raw:?}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub ethnicity: String,
    pub race: String,
}

/// A patient trajectory with its outcome label.
///
/// `gap_years` is the prediction gap between the last usable event and
/// `index_date`; raw, uncut histories carry a gap of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub demographics: Demographics,
    pub index_date: NaiveDate,
    pub label: u8,
    #[serde(default = "default_gap")]
    pub gap_years: f64,
    pub events: Vec<ClinicalEvent>,
}

fn default_gap() -> f64 {
    1.0
}

impl PatientRecord {
    /// The prediction cutoff: `index_date` minus the prediction gap.
    pub fn cutoff(&self) -> NaiveDate {
        sub_years(self.index_date, self.gap_years)
    }

    /// Distinct event days, ascending.
    pub fn visit_dates(&self) -> Vec<NaiveDate> {
        let mut dates: Vec<NaiveDate> = self.events.iter().map(ClinicalEvent::date).collect();
        dates.dedup();
        dates
    }

    pub fn visit_count(&self) -> usize {
        self.visit_dates().len()
    }

    pub fn age_at(&self, date: NaiveDate) -> i32 {
        crate::util::age_years(self.demographics.birth_date, date)
    }

    /// Stable sort by timestamp; ties keep their current order.
    pub fn sort_events(&mut self) {
        self.events.sort_by_key(|e| e.timestamp);
    }
}

/// Case and control records for one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub cancer_type: String,
    pub cases: Vec<PatientRecord>,
    pub controls: Vec<PatientRecord>,
    pub gap_years: f64,
}

impl Cohort {
    pub fn records(&self) -> impl Iterator<Item = &PatientRecord> {
        self.cases.iter().chain(self.controls.iter())
    }

    pub fn len(&self) -> usize {
        self.cases.len() + self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}: {}", self.line, self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    /// Full histories: `index_date`/`label` optional, no cutoff check.
    Raw,
    /// Cohort records: `index_date` and `label` required, events must not
    /// pass the prediction cutoff.
    #[default]
    Cohort,
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub mode: IngestMode,
    pub default_gap_years: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            mode: IngestMode::Cohort,
            default_gap_years: 1.0,
        }
    }
}

impl IngestOptions {
    pub fn raw() -> Self {
        Self {
            mode: IngestMode::Raw,
            default_gap_years: 0.0,
        }
    }
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub records: Vec<PatientRecord>,
    pub errors: Vec<LineError>,
}

/// Read a JSON-lines record file. Bad lines land in the error report.
pub fn ingest_records(path: &Path, opts: IngestOptions) -> Result<IngestReport, RecordError> {
    let file = std::fs::File::open(path).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = IngestReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record_line(&line, i + 1, opts) {
            Ok(r) => report.records.push(r),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

/// Parse and validate one JSON-lines record.
pub fn parse_record_line(line: &str, line_no: usize, opts: IngestOptions) -> Result<PatientRecord, LineError> {
    let err = |field: &str, message: String| LineError {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let v: Value = serde_json::from_str(line).map_err(|e| err("json", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| err("json", "expected a JSON object".into()))?;

    let patient_id = match obj.get("patient_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(err("patient_id", "missing or empty".into())),
    };

    let demo = obj
        .get("demographics")
        .and_then(Value::as_object)
        .ok_or_else(|| err("demographics", "missing object".into()))?;
    let birth_date = date_field(demo.get("birth_date")).map_err(|m| err("demographics.birth_date", m))?;
    let sex = demo
        .get("sex")
        .and_then(Value::as_str)
        .and_then(Sex::parse)
        .ok_or_else(|| err("demographics.sex", "expected \"female\" or \"male\"".into()))?;
    let text = |key: &str| demo.get(key).and_then(Value::as_str).unwrap_or("").to_string();
    let demographics = Demographics {
        birth_date,
        sex,
        ethnicity: text("ethnicity"),
        race: text("race"),
    };

    let raw_events = obj
        .get("events")
        .and_then(Value::as_array)
        .ok_or_else(|| err("events", "missing array".into()))?;
    let mut events = Vec::with_capacity(raw_events.len());
    for (j, ev) in raw_events.iter().enumerate() {
        events.push(parse_event(ev).map_err(|(field, m)| err(&format!("events[{j}].{field}"), m))?);
    }
    events.sort_by_key(|e| e.timestamp);

    let index_date = match (obj.get("index_date"), opts.mode) {
        (Some(Value::Null) | None, IngestMode::Raw) => events
            .last()
            .map(ClinicalEvent::date)
            .unwrap_or(birth_date),
        (v, _) => date_field(v).map_err(|m| err("index_date", m))?,
    };
    let label = match (obj.get("label"), opts.mode) {
        (Some(Value::Null) | None, IngestMode::Raw) => 0,
        (Some(v), _) => match v.as_u64() {
            Some(l @ (0 | 1)) => l as u8,
            _ => return Err(err("label", format!("expected 0 or 1, got {v}"))),
        },
        (None, IngestMode::Cohort) => return Err(err("label", "missing".into())),
    };
    let gap_years = match obj.get("gap_years") {
        Some(v) => v
            .as_f64()
            .filter(|g| g.is_finite() && *g >= 0.0)
            .ok_or_else(|| err("gap_years", format!("expected non-negative number, got {v}")))?,
        None => opts.default_gap_years,
    };

    let record = PatientRecord {
        patient_id,
        demographics,
        index_date,
        label,
        gap_years,
        events,
    };

    if let Some((j, e)) = record
        .events
        .iter()
        .enumerate()
        .find(|(_, e)| e.date() < birth_date)
    {
        return Err(err(
            &format!("events[{j}].timestamp"),
            format!("{} precedes birth date {birth_date}", e.date()),
        ));
    }
    if let Some(last) = record.events.last() {
        if last.date() > record.index_date {
            return Err(err(
                "events",
                format!("event on {} is after index date {}", last.date(), record.index_date),
            ));
        }
        if opts.mode == IngestMode::Cohort && last.date() > record.cutoff() {
            return Err(err(
                "events",
                format!("event on {} is after prediction cutoff {}", last.date(), record.cutoff()),
            ));
        }
    }
    Ok(record)
}

fn date_field(v: Option<&Value>) -> Result<NaiveDate, String> {
    let s = v.and_then(Value::as_str).ok_or("missing date")?;
    parse_timestamp(s)
        .map(|t| t.date())
        .ok_or_else(|| format!("invalid date {s:?}"))
}

fn parse_event(v: &Value) -> Result<ClinicalEvent, (&'static str, String)> {
    let obj = v.as_object().ok_or(("", "expected object".to_string()))?;
    let ts = obj
        .get("timestamp")
        .and_then(Value::as_str)
        .ok_or(("timestamp", "missing".to_string()))?;
    let timestamp = parse_timestamp(ts).ok_or(("timestamp", format!("invalid date {ts:?}")))?;
    let m = obj
        .get("modality")
        .and_then(Value::as_str)
        .ok_or(("modality", "missing".to_string()))?;
    let modality = Modality::parse(m).ok_or(("modality", format!("unknown modality {m:?}")))?;
    let raw_payload = obj
        .get("payload")
        .and_then(Value::as_object)
        .ok_or(("payload", "missing object".to_string()))?;
    let mut payload = BTreeMap::new();
    for (k, v) in raw_payload {
        let s = match v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Null => continue,
            _ => return Err(("payload", format!("value for {k:?} is not a scalar"))),
        };
        payload.insert(k.clone(), s);
    }
    if !payload.values().any(|s| !s.trim().is_empty()) {
        return Err(("payload", "no non-empty entry".to_string()));
    }
    Ok(ClinicalEvent {
        timestamp,
        modality,
        payload,
    })
}

/// Write records as JSON lines.
pub fn write_records<'a, W: std::io::Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a PatientRecord>,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Result of left-truncating a trajectory to a token budget.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub record: PatientRecord,
    pub token_count: usize,
    /// Set when the newest day alone exceeds the budget and was kept whole.
    pub over_budget: bool,
}

/// Keep the most recent whole days of events whose XML fits `max_tokens`.
///
/// Demographics are always kept. If the newest day alone is over budget it
/// is still kept intact and `over_budget` is set.
pub fn truncate_trajectory(record: &PatientRecord, max_tokens: usize, counter: &dyn TokenCounter) -> Truncation {
    let max_tokens = max_tokens.max(1);
    let doc = xml::to_xml(record);
    let full = counter.count(&doc.text);
    let groups = doc.segment_index.len();
    if full <= max_tokens || groups == 0 {
        return Truncation {
            record: record.clone(),
            token_count: full,
            over_budget: full > max_tokens,
        };
    }
    let (head, tail) = doc.envelope();
    let cost = |keep: usize| -> usize {
        if keep == 0 {
            return counter.count(&format!("{head}{tail}"));
        }
        let start = doc.segment_index[groups - keep].range.start;
        let end = doc.segment_index[groups - 1].range.end;
        let mut text = String::with_capacity(head.len() + (end - start) + tail.len());
        text.push_str(head);
        text.push_str(&doc.text[start..end]);
        text.push_str(tail);
        counter.count(&text)
    };
    // largest keep in [1, groups) with cost(keep) <= max_tokens
    let (mut lo, mut hi) = (0usize, groups);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cost(mid) <= max_tokens {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let keep = lo.max(1);
    let first_kept = doc.segment_index[groups - keep].date;
    let mut out = record.clone();
    out.events.retain(|e| e.date() >= first_kept);
    let token_count = cost(keep);
    Truncation {
        record: out,
        token_count,
        over_budget: token_count > max_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::WordApprox;
    use std::io::Write;

    fn opts() -> IngestOptions {
        IngestOptions::default()
    }

    const LINE: &str = r#"{"patient_id":"p1","demographics":{"birth_date":"1950-01-01","sex":"female","ethnicity":"Not Hispanic","race":"White"},"index_date":"2020-06-01","label":1,"events":[{"timestamp":"2018-03-01","modality":"condition","payload":{"code":"J44.9","display":"COPD"}},{"timestamp":"2017-01-05","modality":"lab_result","payload":{"display":"Hemoglobin","value":11.2,"unit":"g/dL"}},{"timestamp":"2018-03-01","modality":"medication","payload":{"display":"tiotropium"}}]}"#;

    #[test]
    fn empty_file_gives_empty_report() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let rep = ingest_records(f.path(), opts()).unwrap();
        assert!(rep.records.is_empty());
        assert!(rep.errors.is_empty());
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(ingest_records(Path::new("/nonexistent/x.jsonl"), opts()).is_err());
    }

    #[test]
    fn events_are_sorted_stably() {
        let r = parse_record_line(LINE, 1, opts()).unwrap();
        let got: Vec<_> = r
            .events
            .iter()
            .map(|e| (e.date().to_string(), e.modality))
            .collect();
        assert_eq!(
            got,
            vec![
                ("2017-01-05".into(), Modality::LabResult),
                ("2018-03-01".into(), Modality::Condition),
                ("2018-03-01".into(), Modality::Medication),
            ]
        );
        assert_eq!(r.events[0].payload["value"], "11.2");
    }

    #[test]
    fn unknown_modality_is_reported_with_line_and_field() {
        let bad = LINE.replace("\"lab_result\"", "\"imaging\"");
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{LINE}").unwrap();
        writeln!(f, "{bad}").unwrap();
        let rep = ingest_records(f.path(), opts()).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.errors.len(), 1);
        let e = &rep.errors[0];
        assert_eq!(e.line, 2);
        assert_eq!(e.field, "events[1].modality");
        assert!(e.message.contains("imaging"));
    }

    #[test]
    fn out_of_range_dates_are_line_errors() {
        let bad = LINE.replace("2017-01-05", "2017-13-45");
        let e = parse_record_line(&bad, 3, opts()).unwrap_err();
        assert_eq!(e.field, "events[1].timestamp");
        let late = LINE.replace("2018-03-01", "2019-12-01");
        let e = parse_record_line(&late, 4, opts()).unwrap_err();
        assert!(e.message.contains("cutoff"), "{e}");
        // raw mode has no cutoff
        assert!(parse_record_line(&late, 4, IngestOptions::raw()).is_ok());
    }

    #[test]
    fn raw_mode_fills_index_and_label() {
        let line = r#"{"patient_id":"r","demographics":{"birth_date":"1950-01-01","sex":"M","ethnicity":"","race":""},"events":[{"timestamp":"2019-01-01","modality":"observation","payload":{"display":"smoker"}}]}"#;
        let r = parse_record_line(line, 1, IngestOptions::raw()).unwrap();
        assert_eq!(r.index_date.to_string(), "2019-01-01");
        assert_eq!(r.label, 0);
        assert_eq!(r.cutoff(), r.index_date);
        assert!(parse_record_line(line, 1, opts()).is_err());
    }

    #[test]
    fn empty_payload_rejected() {
        let bad = LINE.replace(r#"{"display":"tiotropium"}"#, r#"{"display":"  "}"#);
        let e = parse_record_line(&bad, 1, opts()).unwrap_err();
        assert_eq!(e.field, "events[2].payload");
    }

    #[test]
    fn serde_round_trip() {
        let r = parse_record_line(LINE, 1, opts()).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back = parse_record_line(&s, 1, opts()).unwrap();
        assert_eq!(r, back);
    }

    fn day_record(days: &[(u32, usize)]) -> PatientRecord {
        let mut events = Vec::new();
        for &(day, n) in days {
            let t = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap() + chrono::Days::new(day as u64);
            for k in 0..n {
                events.push(
                    ClinicalEvent::new(t.and_hms_opt(0, 0, 0).unwrap(), Modality::Observation)
                        .with("display", format!("finding number {k} on day {day}")),
                );
            }
        }
        PatientRecord {
            patient_id: "t".into(),
            demographics: Demographics {
                birth_date: NaiveDate::from_ymd_opt(1950, 1, 1).unwrap(),
                sex: Sex::Male,
                ethnicity: "x".into(),
                race: "y".into(),
            },
            index_date: NaiveDate::from_ymd_opt(2030, 1, 1).unwrap(),
            label: 0,
            gap_years: 1.0,
            events,
        }
    }

    #[test]
    fn truncation_noop_when_fitting() {
        let r = day_record(&[(0, 2), (5, 1)]);
        let t = truncate_trajectory(&r, 10_000, &WordApprox);
        assert_eq!(t.record, r);
        assert!(!t.over_budget);
    }

    #[test]
    fn truncation_keeps_newest_days() {
        let r = day_record(&[(0, 3), (5, 3), (9, 3)]);
        let full = WordApprox.count(&xml::to_xml(&r).text);
        let t = truncate_trajectory(&r, full - 1, &WordApprox);
        assert!(t.token_count < full);
        assert!(!t.over_budget);
        let days: Vec<_> = t.record.visit_dates();
        assert_eq!(days.len(), 2);
        assert_eq!(t.record.events.len(), 6);
        assert_eq!(t.record.demographics, r.demographics);
    }

    #[test]
    fn oversized_newest_day_is_kept_and_flagged() {
        let r = day_record(&[(0, 2), (3, 400)]);
        let t = truncate_trajectory(&r, 50, &WordApprox);
        assert!(t.over_budget);
        assert!(t.token_count > 50);
        assert_eq!(t.record.visit_dates().len(), 1);
        assert_eq!(t.record.events.len(), 400);
    }
}
