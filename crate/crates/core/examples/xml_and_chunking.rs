//! Serialize a history to the patient XML and cut it into chunks.
//!
//! `cargo run --example xml_and_chunking`

use chrono::NaiveDate;
use trajchain::record::Sex;
use trajchain::{chunk, to_xml, ClinicalEvent, Demographics, Modality, PatientRecord, WordApprox};

fn main() -> anyhow::Result<()> {
    let at = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(9, 0, 0).unwrap();
    let mut events = Vec::new();
    for year in 2012..2020 {
        events.push(ClinicalEvent::new(at(year, 3, 1), Modality::Condition).with("code", "J44.9").with("display", "COPD"));
        events.push(ClinicalEvent::new(at(year, 3, 1), Modality::LabResult).with("display", "Hemoglobin").with("value", "<12"));
        events.push(ClinicalEvent::new(at(year, 9, 15), Modality::Medication).with("display", "tiotropium & olodaterol"));
    }
    let mut record = PatientRecord {
        patient_id: "demo".into(),
        demographics: Demographics {
            birth_date: NaiveDate::from_ymd_opt(1954, 6, 2).unwrap(),
            sex: Sex::Male,
            ethnicity: "Not Hispanic or Latino".into(),
            race: "White".into(),
        },
        index_date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
        label: 0,
        gap_years: 1.0,
        events,
    };
    record.sort_events();

    let doc = to_xml(&record);
    println!("{}", doc.text.lines().take(8).collect::<Vec<_>>().join("\n"));
    println!("... {} visits\n", doc.segment_index.len());

    for limit in [256, 128, 64] {
        let chunks = chunk(&doc, limit, &WordApprox)?;
        println!("limit {limit}: {} chunks", chunks.len());
        for c in &chunks {
            let (a, b) = c.span.unwrap();
            println!("  #{} {a}..{b} tokens={} events={} split={}", c.ordinal, c.token_count, c.event_count, c.split_group);
        }
    }
    Ok(())
}
