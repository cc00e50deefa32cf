#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use trajchain::record::Sex;
use trajchain::{ClinicalEvent, Demographics, Modality, PatientRecord};

pub fn day(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 1, 1).unwrap() + Duration::days(n)
}

pub fn event(date: NaiveDate, modality: Modality, display: &str) -> ClinicalEvent {
    ClinicalEvent::new(date.and_hms_opt(0, 0, 0).unwrap(), modality).with("display", display)
}

pub fn record(id: &str, birth: NaiveDate, index: NaiveDate, label: u8, events: Vec<ClinicalEvent>) -> PatientRecord {
    let mut r = PatientRecord {
        patient_id: id.into(),
        demographics: Demographics {
            birth_date: birth,
            sex: Sex::Female,
            ethnicity: "Not Hispanic or Latino".into(),
            race: "White".into(),
        },
        index_date: index,
        label,
        gap_years: 1.0,
        events,
    };
    r.sort_events();
    r
}

const WORDS: [&str; 12] = [
    "cough", "chest", "pain", "nodule", "fatigue", "screening", "follow", "up", "x-ray", "inhaler", "fever", "lab",
];

/// A history of `visits` visit days, each with 1..=`max_events` events whose
/// display text has 1..=`max_words` words.
pub fn random_record<R: Rng>(rng: &mut R, id: &str, visits: usize, max_events: usize, max_words: usize) -> PatientRecord {
    let mut events = Vec::new();
    let mut d = 0i64;
    for _ in 0..visits {
        d += rng.gen_range(1..90);
        for _ in 0..rng.gen_range(1..=max_events) {
            let n = rng.gen_range(1..=max_words);
            let text: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            let modality = Modality::ALL[rng.gen_range(0..Modality::ALL.len())];
            events.push(event(day(d), modality, &text.join(" ")));
        }
    }
    record(id, day(-365 * 60), day(d + 400), 0, events)
}

/// `(visit date, event line)` pairs of a chunk or document text.
pub fn dated_events(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut date = String::new();
    for line in text.lines() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("<visit date=\"") {
            date = rest[..10].to_string();
        } else if t.starts_with('<') && !t.starts_with("</") && !t.starts_with("<patient") && !t.starts_with("<demographics")
        {
            out.push((date.clone(), t.to_string()));
        }
    }
    out
}

/// Counts of each distinct item.
pub fn multiset<T: Ord + Clone>(items: &[T]) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for i in items {
        *m.entry(i.clone()).or_default() += 1;
    }
    m
}

/// A one-thread HTTP server that answers successive requests with the given
/// `(status, body)` pairs and records each request body. Returns the base URL.
pub fn stub_server(replies: Vec<(u16, String)>) -> (String, std::sync::Arc<std::sync::Mutex<Vec<String>>>) {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).ok();
            log.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).ok();
        }
    });
    (base, seen)
}
