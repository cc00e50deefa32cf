use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::pipeline::{predict, PredictionResult};
use super::ChainContext;
use crate::record::PatientRecord;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines output, appended to as patients finish. Existing lines
    /// mark patients as done.
    pub out: Option<PathBuf>,
    /// Defaults to `<out>.failures.jsonl`.
    pub failures: Option<PathBuf>,
}

impl RunOptions {
    pub fn to_file(out: impl Into<PathBuf>) -> Self {
        Self {
            out: Some(out.into()),
            failures: None,
        }
    }

    pub fn failures_path(&self) -> Option<PathBuf> {
        self.failures.clone().or_else(|| {
            self.out.as_ref().map(|o| {
                let mut s = o.clone().into_os_string();
                s.push(".failures.jsonl");
                PathBuf::from(s)
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub patient_id: String,
    pub ordinal: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct CohortRun {
    /// All results, including ones resumed from the output file, sorted by
    /// patient id.
    pub results: Vec<PredictionResult>,
    pub failures: Vec<FailureRecord>,
    /// Patients skipped because the output file already had them.
    pub resumed: usize,
}

/// Read a predictions file, skipping lines that do not parse (such as a
/// line cut short by an interrupted run).
pub fn read_predictions(path: &Path) -> std::io::Result<Vec<PredictionResult>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(line = i + 1, error = %e, path = %path.display(), "skipping unreadable prediction"),
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Predict every record, `ctx.config.concurrency` patients at a time. Each
/// patient's chain is sequential; patients are independent. A failing
/// patient is recorded and the run continues.
pub fn run_cohort(records: &[PatientRecord], ctx: &ChainContext, opts: &RunOptions) -> std::io::Result<CohortRun> {
    let previous = match &opts.out {
        Some(p) if p.exists() => read_predictions(p)?,
        _ => Vec::new(),
    };
    let done: BTreeSet<&str> = previous.iter().map(|r| r.patient_id.as_str()).collect();
    let todo: Vec<&PatientRecord> = records
        .iter()
        .filter(|r| !done.contains(r.patient_id.as_str()))
        .collect();
    let resumed = records.len() - todo.len();
    if resumed > 0 {
        tracing::info!(resumed, remaining = todo.len(), "resuming");
    }

    let sink = match &opts.out {
        Some(p) => {
            // rewrite first so a truncated trailing line cannot merge with new output
            write_jsonl(p, &previous)?;
            Some(Mutex::new(OpenOptions::new().append(true).open(p)?))
        }
        None => None,
    };
    let results = Mutex::new(previous);
    let failures = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let io_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    std::thread::scope(|s| {
        for _ in 0..ctx.config.concurrency.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = todo.get(i) else { break };
                match predict(record, ctx) {
                    Ok(r) => {
                        tracing::info!(patient = %r.patient_id, score = r.score, chunks = r.chunk_count, "patient done");
                        if let Some(f) = &sink {
                            let mut line = serde_json::to_string(&r).expect("json");
                            line.push('\n');
                            let mut f = f.lock().unwrap_or_else(|e| e.into_inner());
                            if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                                io_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                            }
                        }
                        results.lock().unwrap_or_else(|e| e.into_inner()).push(r);
                    }
                    Err(e) => {
                        tracing::error!(error = %e, "patient failed");
                        failures.lock().unwrap_or_else(|e| e.into_inner()).push(FailureRecord {
                            patient_id: e.patient_id.clone(),
                            ordinal: e.ordinal,
                            error: e.to_string(),
                        });
                    }
                }
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }

    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let mut failures = failures.into_inner().unwrap_or_else(|e| e.into_inner());
    failures.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(p) = &opts.out {
        write_jsonl(p, &results)?;
    }
    if let Some(p) = opts.failures_path() {
        write_jsonl(&p, &failures)?;
    }
    Ok(CohortRun {
        results,
        failures,
        resumed,
    })
}
