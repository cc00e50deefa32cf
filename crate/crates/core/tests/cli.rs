//! The `trajchain` binary: exit codes, settings precedence and repeatable
//! runs from a manifest.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trajchain(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajchain"));
    cmd.args(["--log-level", "error"]).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("TRAJCHAIN_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = trajchain(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The diagnosis code set the generator plants.
fn write_codes(dir: &Path) {
    let codes = trajchain::synth::SynthConfig::default().diagnosis_codes;
    std::fs::write(dir.join("codes.txt"), codes.join("\n")).unwrap();
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(trajchain(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(trajchain(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(trajchain(&["bogus"], &[]).status.code(), Some(1));
    let missing = trajchain(&["predict"], &[]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--cohort"));
    let dir = tempfile::tempdir().unwrap();
    let absent = s(&dir.path().join("absent.jsonl"));
    let out = s(&dir.path().join("e.json"));
    assert_eq!(trajchain(&["eval", "--preds", &absent, "--out", &out], &[]).status.code(), Some(2));
    let bad_backend = trajchain(&["predict", "--cohort", &absent, "--backend", "telepathy", "--out", &out], &[]);
    assert_eq!(bad_backend.status.code(), Some(1));
}

#[test]
fn flags_beat_environment_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("settings.toml");
    std::fs::write(&cfg, "seed = 1\n[synth]\nn_cases = 4\nn_controls = 6\n").unwrap();
    let seed_of = |name: &str, flag: Option<&str>, env: &[(&str, &str)]| {
        let out = dir.path().join(name);
        let mut args = vec!["--config".to_string(), s(&cfg), "synth".into(), "--out".into(), s(&out)];
        if let Some(f) = flag {
            args.extend(["--seed".into(), f.into()]);
        }
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = trajchain(&argv, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = json(&dir.path().join(format!("{name}.manifest.json")));
        assert_eq!(m["config"]["n_cases"], 4);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 10);
        m["seeds"]["run"].as_u64().unwrap()
    };
    assert_eq!(seed_of("a.jsonl", None, &[]), 1);
    assert_eq!(seed_of("b.jsonl", None, &[("TRAJCHAIN_SEED", "2")]), 2);
    assert_eq!(seed_of("c.jsonl", Some("3"), &[("TRAJCHAIN_SEED", "2")]), 3);
}

/// Wall time is the one field allowed to differ between runs.
fn without_timing(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_ms");
            v
        })
        .collect()
}

#[test]
fn manifest_repeats_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    ok(&["synth", "--out", &p("raw.jsonl"), "--key", &p("key.json"), "--script", &p("s.yaml"), "--seed", "5", "--n-cases", "12", "--n-controls", "30"]);
    write_codes(dir.path());
    ok(&["cohort", "--records", &p("raw.jsonl"), "--codes", &p("codes.txt"), "--gap-years", "1", "--seed", "2", "--out", &p("cohort.jsonl")]);
    let backend = format!("scripted:{}", p("s.yaml"));
    ok(&["predict", "--cohort", &p("cohort.jsonl"), "--backend", &backend, "--limit", "200", "--k", "4", "--out", &p("one.jsonl")]);

    let manifest = json(&dir.path().join("one.jsonl.manifest.json"));
    assert_eq!(manifest["command"], "predict");
    assert_eq!(manifest["config"]["k"], 4);
    assert!(manifest["backend"].as_str().unwrap().starts_with("scripted"));
    let digest = manifest["outputs"][p("one.jsonl")].as_str().unwrap().to_string();
    assert_eq!(digest.len(), 64);

    ok(&["--config", &p("one.jsonl.manifest.json"), "predict", "--out", &p("two.jsonl")]);
    assert_eq!(without_timing(&dir.path().join("one.jsonl")), without_timing(&dir.path().join("two.jsonl")));

    ok(&["eval", "--preds", &p("one.jsonl"), "--out", &p("e1.json"), "--boot", "50", "--seed", "9"]);
    ok(&["--config", &p("e1.json.manifest.json"), "eval", "--out", &p("e2.json")]);
    assert_eq!(std::fs::read(dir.path().join("e1.json")).unwrap(), std::fs::read(dir.path().join("e2.json")).unwrap());
}

#[test]
fn chunk_topics_and_transitions_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    ok(&["synth", "--out", &p("raw.jsonl"), "--key", &p("key.json"), "--script", &p("s.yaml"), "--seed", "8", "--n-cases", "10", "--n-controls", "20"]);
    ok(&["chunk", "--records", &p("raw.jsonl"), "--limit", "256", "--out", &p("chunks")]);
    let manifest = json(&dir.path().join("chunks/manifest.json"));
    assert!(manifest.as_object().map_or(manifest.as_array().is_some(), |_| true));
    assert!(dir.path().join("chunks/run_manifest.json").exists());

    write_codes(dir.path());
    ok(&["cohort", "--records", &p("raw.jsonl"), "--codes", &p("codes.txt"), "--gap-years", "1", "--seed", "1", "--out", &p("cohort.jsonl")]);
    let backend = format!("scripted:{}", p("s.yaml"));
    ok(&["predict", "--cohort", &p("cohort.jsonl"), "--backend", &backend, "--limit", "256", "--out", &p("preds.jsonl")]);
    ok(&["transitions", "--preds", &p("preds.jsonl"), "--out", &p("tr.csv"), "--details", &p("td.csv")]);
    let table = std::fs::read_to_string(dir.path().join("tr.csv")).unwrap();
    assert!(table.starts_with("age_band,from_state,to_state,count"));
    assert!(table.contains(",diagnosis,"));

    let themes = dir.path().join("themes.yaml");
    std::fs::write(
        &themes,
        concat!(
            "strict: false\n",
            "entries:\n",
            "  - match: {contains: \"Patient summaries:\"}\n",
            "    reply: {text: '[\"persistent cough with chest pain\", \"abnormal chest imaging finding\"]'}\n",
            "fallback: {text: '[{\"id\": 1, \"themes\": [\"Persistent cough with chest pain\"]}]'}\n",
        ),
    )
    .unwrap();
    let theme_backend = format!("scripted:{}", s(&themes));
    ok(&["topics", "--docs", &p("preds.jsonl"), "--backend", &theme_backend, "--k", "2", "--batch-size", "1", "--out", &p("topics.json"), "--embed-out", &p("emb.csv")]);
    let topics = json(&dir.path().join("topics.json"));
    let group = topics.as_object().unwrap().values().next().unwrap();
    let n = group["documents"].as_u64().unwrap();
    assert!(n > 0);
    assert_eq!(group["themes"].as_array().unwrap().len(), 2);
    assert_eq!(group["assignments"].as_array().unwrap().len() as u64, n);
    let csv = std::fs::read_to_string(dir.path().join("emb.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, n + 1);
}
