//! A finding seen only in the first chunk still reaches the manager,
//! because every worker appends to the shared long-term memory.
//!
//! `cargo run --example long_term_memory`

use std::sync::Arc;

use chrono::NaiveDate;
use trajchain::agents::{render_entries, MemoryEntry, MemoryStore};
use trajchain::llm::policy::Policy;
use trajchain::record::Sex;
use trajchain::{predict, ChainConfig, ChainContext, ClinicalEvent, Demographics, Modality, PatientRecord, ScriptedBackend};

fn main() -> anyhow::Result<()> {
    let day = |n: i64| NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Duration::days(n);
    let mut events = vec![ClinicalEvent::new(day(0).and_hms_opt(0, 0, 0).unwrap(), Modality::Condition).with("display", "hemoptysis")];
    for v in 1..40 {
        for e in 0..4 {
            events.push(
                ClinicalEvent::new(day(v * 15).and_hms_opt(0, 0, 0).unwrap(), Modality::Observation)
                    .with("display", format!("routine vital sign {e}")),
            );
        }
    }
    let record = PatientRecord {
        patient_id: "ltm".into(),
        demographics: Demographics {
            birth_date: day(-365 * 66),
            sex: Sex::Female,
            ethnicity: "Hispanic or Latino".into(),
            race: "Other".into(),
        },
        index_date: day(1200),
        label: 1,
        gap_years: 1.0,
        events,
    };
    let backend = Arc::new(ScriptedBackend::with_policy(Policy::Marker {
        markers: vec!["hemoptysis".into()],
    }));
    let config = ChainConfig {
        chunk_limit: 200,
        memory_k: 2,
        ..ChainConfig::default()
    };
    let result = predict(&record, &ChainContext::new(backend, config))?;
    println!("chunks read: {}", result.chunk_count);
    println!("memory entries: {}", result.memory_snapshot.len());
    println!("manager final events: {:?}", result.manager.final_events);
    println!("risk: {}/10", result.manager.risk_level);

    // deduplication: the same (timestamp, event) key is stored once
    let mut m = MemoryStore::new();
    for chunk in 1..=3 {
        m.append(MemoryEntry {
            timestamp: "2015-01-01".into(),
            event: "Hemoptysis ".into(),
            source_chunk: chunk,
        });
    }
    println!("\nafter three identical appends:\n{}", render_entries(m.entries()));
    Ok(())
}
