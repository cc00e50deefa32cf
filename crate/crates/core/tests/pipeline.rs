//! Cohort runs, the live HTTP backend and chain bookkeeping.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{day, event, random_record, record, stub_server};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use trajchain::agents::{read_predictions, FailurePolicy, RunOptions};
use trajchain::llm::policy::Policy;
use trajchain::llm::{BackendError, LiveBackend, LiveConfig};
use trajchain::{predict, run_cohort, ChainConfig, ChainContext, ChatBackend, ChatRequest, ChatResponse, Modality, ScriptedBackend};

/// Echoes like the default policy but fails on any prompt naming `poison`.
struct Poisoned {
    inner: ScriptedBackend,
    calls: AtomicUsize,
}

impl ChatBackend for Poisoned {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if request.user_prompt.contains("poison") {
            return Err(BackendError::Transport("connection reset".into()));
        }
        self.inner.complete(request)
    }

    fn identity(&self) -> String {
        "poisoned".into()
    }
}

fn cohort(n: usize) -> Vec<trajchain::PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..n).map(|i| random_record(&mut rng, &format!("p{i:02}"), 8, 3, 6)).collect()
}

fn config(limit: usize) -> ChainConfig {
    ChainConfig {
        chunk_limit: limit,
        concurrency: 3,
        ..ChainConfig::default()
    }
}

#[test]
fn one_failing_patient_does_not_stop_the_run() {
    let mut records = cohort(6);
    let first = records[2].events[0].date();
    records[2].events.push(event(first, Modality::Observation, "poison pill"));
    records[2].sort_events();
    let backend = Arc::new(Poisoned {
        inner: ScriptedBackend::with_policy(Policy::Echo),
        calls: AtomicUsize::new(0),
    });
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preds.jsonl");
    let run = run_cohort(&records, &ChainContext::new(backend, config(200)), &RunOptions::to_file(&out)).unwrap();
    assert_eq!(run.results.len(), 5);
    assert_eq!(run.failures.len(), 1);
    assert_eq!(run.failures[0].patient_id, "p02");
    assert!(run.failures[0].error.contains("connection reset"));
    let failures = std::fs::read_to_string(dir.path().join("preds.jsonl.failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1);
    let ids: Vec<String> = read_predictions(&out).unwrap().into_iter().map(|r| r.patient_id).collect();
    assert_eq!(ids, ["p00", "p01", "p03", "p04", "p05"]);
}

#[test]
fn resume_skips_finished_patients_and_tolerates_a_torn_line() {
    let records = cohort(5);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preds.jsonl");
    let echo = || Arc::new(ScriptedBackend::with_policy(Policy::Echo).recording());

    let first = echo();
    run_cohort(&records[..3], &ChainContext::new(first.clone(), config(150)), &RunOptions::to_file(&out)).unwrap();
    let mut text = std::fs::read_to_string(&out).unwrap();
    text.push_str("{\"patient_id\": \"p03\", \"lab");
    std::fs::write(&out, text).unwrap();

    let second = echo();
    let run = run_cohort(&records, &ChainContext::new(second.clone(), config(150)), &RunOptions::to_file(&out)).unwrap();
    assert_eq!(run.resumed, 3);
    assert_eq!(run.results.len(), 5);
    let fresh = ChainContext::new(echo(), config(150));
    let expected_calls: usize = records[3..].iter().map(|r| predict(r, &fresh).unwrap().chunk_count + 1).sum();
    assert_eq!(second.call_count(), expected_calls);
    let on_disk = read_predictions(&out).unwrap();
    assert_eq!(on_disk.len(), 5);
    assert!(std::fs::read_to_string(&out).unwrap().lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn memory_is_deduplicated_and_attributed_to_chunks() {
    // the same finding recurs every visit; the memory keeps its first sighting per date
    let events: Vec<_> = (0..12)
        .flat_map(|v| (0..4).map(move |e| event(day(v * 40), Modality::Condition, &format!("persistent cough item {e}"))))
        .collect();
    let r = record("mem", day(-25_000), day(900), 1, events);
    let ctx = ChainContext::new(Arc::new(ScriptedBackend::with_policy(Policy::Echo)), config(120));
    let res = predict(&r, &ctx).unwrap();
    assert!(res.chunk_count > 2);
    let keys: std::collections::BTreeSet<(String, String)> =
        res.memory_snapshot.iter().map(|m| (m.timestamp.clone(), trajchain::agents::normalize(&m.event))).collect();
    assert_eq!(keys.len(), res.memory_snapshot.len(), "duplicate memory entries");
    assert!(res.memory_snapshot.windows(2).all(|w| w[0].source_chunk <= w[1].source_chunk));
    assert!((1..=res.chunk_count).all(|c| res.memory_snapshot.iter().any(|m| m.source_chunk == c)));
    assert!((res.score * 10.0).round() >= 1.0 && res.score <= 1.0);
}

#[test]
fn unparseable_worker_output_aborts_or_carries_forward() {
    use trajchain::llm::{Matcher, Reply, Script};
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = random_record(&mut rng, "bad", 30, 3, 6);
    // the second worker always answers with prose
    let script = Script::new(false)
        .entry(Matcher::contains("<previous_summary>"), Reply::text("I cannot help with that."))
        .entry(Matcher::any(), Reply::policy(Policy::Echo));
    let abort = ChainContext::new(Arc::new(ScriptedBackend::new(script.clone())), config(150));
    let err = predict(&r, &abort).unwrap_err();
    assert_eq!(err.ordinal, Some(2));
    let mut cfg = config(150);
    cfg.failure_policy = FailurePolicy::CarryForward;
    let res = predict(&r, &ChainContext::new(Arc::new(ScriptedBackend::new(script)), cfg)).unwrap();
    assert!(res.chunk_count > 2);
    assert_eq!(res.worker_trace[1].summary, res.worker_trace[0].summary);
}

fn chat_reply(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 7, "completion_tokens": 2}})
        .to_string()
}

fn live(base: String, attempts: u32) -> LiveBackend {
    LiveBackend::new(LiveConfig {
        api_base: base,
        api_key: Some("sk-test".into()),
        max_attempts: attempts,
        backoff_base_ms: 5,
        backoff_cap_ms: 20,
        timeout_secs: 10,
        ..LiveConfig::default()
    })
    .unwrap()
}

#[test]
fn live_backend_retries_server_errors() {
    let (base, seen) = stub_server(vec![
        (500, "{}".into()),
        (503, "busy".into()),
        (200, chat_reply("hello")),
    ]);
    let backend = live(base, 3);
    let mut req = ChatRequest::new("m1", "sys", "usr");
    req.temperature = 0.0;
    let r = backend.complete(&req).unwrap();
    assert_eq!((r.text.as_str(), r.input_tokens, r.output_tokens), ("hello", 7, 2));
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let body: Value = serde_json::from_str(&bodies[2]).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["messages"][0]["content"], "sys");
    assert_eq!(body["messages"][1]["content"], "usr");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn live_backend_gives_up_and_does_not_retry_client_errors() {
    let (base, seen) = stub_server(vec![(500, "a".into()), (429, "b".into())]);
    match live(base, 2).complete(&ChatRequest::new("m", "s", "u")) {
        Err(BackendError::RetriesExhausted {
            attempts: 2,
            last_status: Some(429),
            ..
        }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 2);

    let (base, seen) = stub_server(vec![(400, "bad request".into()), (200, chat_reply("late"))]);
    match live(base, 3).complete(&ChatRequest::new("m", "s", "u")) {
        Err(BackendError::Http { status: 400, body }) => assert_eq!(body, "bad request"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn live_backend_rejects_malformed_success() {
    let (base, _) = stub_server(vec![(200, "{\"choices\": []}".into())]);
    assert!(matches!(
        live(base, 1).complete(&ChatRequest::new("m", "s", "u")),
        Err(BackendError::Decode(_))
    ));
}
