//! The nested XML representation consumed by agents.
//!
//! Grammar (byte-exact, see `docs/xml-grammar.md`):
//!
//! ```text
//! <patient>
//!   <demographics age="63" birth_year="1957" ethnicity="..." race="..." sex="female"/>
//!   <visit date="2019-03-04">
//!     <condition code="J44.9" display="COPD"/>
//!   </visit>
//! </patient>
//! ```
//!
//! Lowercase element names, attributes sorted by name, two-space indent,
//! LF line endings, one `<visit>` per distinct event day.

use std::ops::Range;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{ClinicalEvent, PatientRecord};

pub const ROOT_OPEN: &str = "<patient>\n";
pub const ROOT_CLOSE: &str = "</patient>\n";

/// Byte range of one `<visit>` element (with its indentation and newline).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub date: NaiveDate,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XmlDocument {
    pub text: String,
    pub segment_index: Vec<Segment>,
}

/// One day of events as serialized element strings (no indentation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitGroup {
    pub date: NaiveDate,
    pub events: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum XmlError {
    #[error("not well-formed XML: {0}")]
    Malformed(String),
    #[error("line {line}: {message}")]
    Grammar { line: usize, message: String },
}

impl XmlDocument {
    /// Text before the first visit (root open + demographics) and the closing tag.
    pub fn envelope(&self) -> (&str, &str) {
        let close = self.text.len() - ROOT_CLOSE.len();
        let head_end = self.segment_index.first().map_or(close, |s| s.range.start);
        (&self.text[..head_end], &self.text[close..])
    }

    /// The demographics line(s), without the root element.
    pub fn header(&self) -> &str {
        &self.envelope().0[ROOT_OPEN.len()..]
    }

    pub fn segment_text(&self, i: usize) -> &str {
        &self.text[self.segment_index[i].range.clone()]
    }

    /// Visit groups with their event lines, in document order.
    pub fn groups(&self) -> Vec<VisitGroup> {
        (0..self.segment_index.len())
            .map(|i| VisitGroup {
                date: self.segment_index[i].date,
                events: visit_event_lines(self.segment_text(i))
                    .map(str::to_string)
                    .collect(),
            })
            .collect()
    }

    pub fn event_count(&self) -> usize {
        (0..self.segment_index.len())
            .map(|i| visit_event_lines(self.segment_text(i)).count())
            .sum()
    }

    /// Assemble a document from a header and visit groups.
    pub fn assemble(header: &str, groups: &[VisitGroup]) -> Self {
        let mut text = String::from(ROOT_OPEN);
        text.push_str(header);
        let mut segment_index = Vec::with_capacity(groups.len());
        for g in groups {
            let start = text.len();
            push_visit(&mut text, g.date, g.events.iter().map(String::as_str));
            segment_index.push(Segment {
                date: g.date,
                range: start..text.len(),
            });
        }
        text.push_str(ROOT_CLOSE);
        Self { text, segment_index }
    }

    /// Re-read a document written in this grammar, rebuilding the segment index.
    pub fn parse(text: &str) -> Result<Self, XmlError> {
        check_well_formed(text)?;
        let mut segment_index = Vec::new();
        let mut offset = 0usize;
        let mut open: Option<(NaiveDate, usize)> = None;
        let mut seen_root = false;
        for (n, line) in text.split_inclusive('\n').enumerate() {
            let start = offset;
            offset += line.len();
            let body = line.trim_end_matches('\n');
            let gerr = |message: &str| XmlError::Grammar {
                line: n + 1,
                message: message.to_string(),
            };
            if !seen_root {
                if body != "<patient>" {
                    return Err(gerr("expected <patient>"));
                }
                seen_root = true;
            } else if let Some(rest) = body.strip_prefix("  <visit date=\"") {
                let date = rest
                    .strip_suffix("\">")
                    .and_then(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
                    .ok_or_else(|| gerr("bad visit date"))?;
                if open.is_some() {
                    return Err(gerr("nested <visit>"));
                }
                if let Some(prev) = segment_index.last().map(|s: &Segment| s.date) {
                    if date <= prev {
                        return Err(gerr("visits out of date order"));
                    }
                }
                open = Some((date, start));
            } else if body == "  </visit>" {
                let (date, s) = open.take().ok_or_else(|| gerr("unmatched </visit>"))?;
                segment_index.push(Segment {
                    date,
                    range: s..offset,
                });
            } else if body == "</patient>" {
                if offset != text.len() {
                    return Err(gerr("content after </patient>"));
                }
            } else {
                let event = body.starts_with("    <") && open.is_some();
                let header = body.starts_with("  <demographics ") && open.is_none() && segment_index.is_empty();
                if !(event || header) {
                    return Err(gerr("unexpected line"));
                }
            }
        }
        if !text.ends_with(ROOT_CLOSE) {
            return Err(XmlError::Grammar {
                line: text.lines().count(),
                message: "missing final </patient> line".into(),
            });
        }
        Ok(Self {
            text: text.to_string(),
            segment_index,
        })
    }
}

/// Event element lines inside one serialized `<visit>` segment.
pub fn visit_event_lines(segment: &str) -> impl Iterator<Item = &str> {
    segment
        .lines()
        .filter_map(|l| l.strip_prefix("    "))
        .filter(|l| !l.is_empty())
}

pub(crate) fn push_visit<'a>(out: &mut String, date: NaiveDate, events: impl Iterator<Item = &'a str>) {
    out.push_str("  <visit date=\"");
    out.push_str(&date.format("%Y-%m-%d").to_string());
    out.push_str("\">\n");
    for e in events {
        out.push_str("    ");
        out.push_str(e);
        out.push('\n');
    }
    out.push_str("  </visit>\n");
}

/// Serialize a record. Age is rendered as of the prediction cutoff.
pub fn to_xml(record: &PatientRecord) -> XmlDocument {
    let d = &record.demographics;
    let age = record.age_at(record.cutoff()).max(0);
    let header = format!(
        "  {}\n",
        element(
            "demographics",
            vec![
                ("age".to_string(), age.to_string()),
                ("birth_year".to_string(), d.birth_date.year().to_string()),
                ("ethnicity".to_string(), d.ethnicity.clone()),
                ("race".to_string(), d.race.clone()),
                ("sex".to_string(), d.sex.as_str().to_string()),
            ],
        )
    );
    let mut groups: Vec<VisitGroup> = Vec::new();
    for ev in &record.events {
        let line = event_element(ev);
        match groups.last_mut() {
            Some(g) if g.date == ev.date() => g.events.push(line),
            _ => groups.push(VisitGroup {
                date: ev.date(),
                events: vec![line],
            }),
        }
    }
    XmlDocument::assemble(&header, &groups)
}

/// `<modality attr="..."/>` for one event; empty payload values are omitted.
pub fn event_element(ev: &ClinicalEvent) -> String {
    let mut attrs: Vec<(String, String)> = Vec::with_capacity(ev.payload.len());
    for (k, v) in &ev.payload {
        if v.trim().is_empty() {
            continue;
        }
        let mut name = attr_name(k);
        let base = name.clone();
        let mut n = 2;
        while attrs.iter().any(|(a, _)| *a == name) {
            name = format!("{base}_{n}");
            n += 1;
        }
        attrs.push((name, v.clone()));
    }
    element(ev.modality.as_str(), attrs)
}

fn element(tag: &str, mut attrs: Vec<(String, String)>) -> String {
    attrs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut s = String::with_capacity(16 + attrs.len() * 24);
    s.push('<');
    s.push_str(tag);
    for (k, v) in &attrs {
        s.push(' ');
        s.push_str(k);
        s.push_str("=\"");
        s.push_str(&escape(v));
        s.push('"');
    }
    s.push_str("/>");
    s
}

/// Lowercase XML name: `[a-z_][a-z0-9_.-]*`.
pub fn attr_name(key: &str) -> String {
    let mut s: String = key
        .trim()
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if !s.starts_with(|c: char| c.is_ascii_lowercase() || c == '_') {
        s.insert(0, '_');
    }
    s
}

/// Attribute-value escaping; line breaks become character references so
/// every element stays on one line.
pub fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            c if (c as u32) < 0x20 => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
    out
}

pub fn check_well_formed(text: &str) -> Result<(), XmlError> {
    roxmltree::Document::parse(text)
        .map(|_| ())
        .map_err(|e| XmlError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Demographics, Modality, Sex};

    fn ts(s: &str) -> chrono::NaiveDateTime {
        crate::util::parse_timestamp(s).unwrap()
    }

    pub(crate) fn sample() -> PatientRecord {
        PatientRecord {
            patient_id: "p1".into(),
            demographics: Demographics {
                birth_date: NaiveDate::from_ymd_opt(1957, 8, 20).unwrap(),
                sex: Sex::Female,
                ethnicity: "Not Hispanic or Latino".into(),
                race: "White".into(),
            },
            index_date: NaiveDate::from_ymd_opt(2021, 9, 1).unwrap(),
            label: 1,
            gap_years: 1.0,
            events: vec![
                ClinicalEvent::new(ts("2019-03-04"), Modality::Condition)
                    .with("code", "J44.9")
                    .with("display", "COPD"),
                ClinicalEvent::new(ts("2019-03-04T10:00:00"), Modality::LabResult)
                    .with("display", "CRP")
                    .with("value", "<5")
                    .with("unit", "mg/L"),
                ClinicalEvent::new(ts("2020-01-10"), Modality::Observation)
                    .with("display", "Tobacco smoking status")
                    .with("value", "Every day smoker"),
            ],
        }
    }

    #[test]
    fn golden_layout() {
        let doc = to_xml(&sample());
        let expected = "<patient>\n  <demographics age=\"63\" birth_year=\"1957\" ethnicity=\"Not Hispanic or Latino\" race=\"White\" sex=\"female\"/>\n  <visit date=\"2019-03-04\">\n    <condition code=\"J44.9\" display=\"COPD\"/>\n    <lab_result display=\"CRP\" unit=\"mg/L\" value=\"&lt;5\"/>\n  </visit>\n  <visit date=\"2020-01-10\">\n    <observation display=\"Tobacco smoking status\" value=\"Every day smoker\"/>\n  </visit>\n</patient>\n";
        assert_eq!(doc.text, expected);
        assert_eq!(doc.segment_index.len(), 2);
    }

    #[test]
    fn zero_events() {
        let mut r = sample();
        r.events.clear();
        let doc = to_xml(&r);
        assert!(doc.segment_index.is_empty());
        assert!(doc.text.starts_with("<patient>\n  <demographics "));
        assert!(doc.text.ends_with("/>\n</patient>\n"));
        check_well_formed(&doc.text).unwrap();
    }

    #[test]
    fn escaped_values_round_trip_through_parser() {
        let doc = to_xml(&sample());
        let parsed = roxmltree::Document::parse(&doc.text).unwrap();
        let lab = parsed
            .descendants()
            .find(|n| n.has_tag_name("lab_result"))
            .unwrap();
        assert_eq!(lab.attribute("value"), Some("<5"));
    }

    #[test]
    fn newlines_in_values_stay_on_one_line() {
        let mut r = sample();
        r.events[0].payload.insert("note".into(), "line1\nline2 \"q\"".into());
        let doc = to_xml(&r);
        let parsed = roxmltree::Document::parse(&doc.text).unwrap();
        let c = parsed.descendants().find(|n| n.has_tag_name("condition")).unwrap();
        assert_eq!(c.attribute("note"), Some("line1\nline2 \"q\""));
        assert_eq!(doc.text.lines().count(), 10);
    }

    #[test]
    fn segments_and_envelope_reassemble_document() {
        let doc = to_xml(&sample());
        let (head, tail) = doc.envelope();
        let mut s = head.to_string();
        for i in 0..doc.segment_index.len() {
            s.push_str(doc.segment_text(i));
        }
        s.push_str(tail);
        assert_eq!(s, doc.text);
        assert_eq!(doc.event_count(), 3);
    }

    #[test]
    fn parse_own_output() {
        let doc = to_xml(&sample());
        assert_eq!(XmlDocument::parse(&doc.text).unwrap(), doc);
        assert!(XmlDocument::parse("<patient>\n<x/>\n</patient>\n").is_err());
        assert!(matches!(XmlDocument::parse("<patient>"), Err(XmlError::Malformed(_))));
    }

    #[test]
    fn attribute_names_are_normalized() {
        assert_eq!(attr_name("Display Name"), "display_name");
        assert_eq!(attr_name("1st"), "_1st");
        let ev = ClinicalEvent::new(ts("2019-01-01"), Modality::Procedure)
            .with("A b", "1")
            .with("a_b", "2")
            .with("empty", "");
        assert_eq!(event_element(&ev), "<procedure a_b=\"1\" a_b_2=\"2\"/>");
    }
}
