use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{layer, load_file, section};
use super::manifest::{manifest_path, RunManifest};
use super::{backend_from_spec, required, usage, Cli, Command};
use crate::agents::{read_predictions, run_cohort, ChainConfig, ChainContext, FailurePolicy, Mode, PredictionResult, RunOptions};
use crate::chunk::{chunk, ChunkManifestEntry, DEFAULT_LIMIT};
use crate::cohort::{build_cohort, read_code_set, PhenotypeConfig};
use crate::eval::{
    curves, evaluate, judge_pair, outcomes_from_predictions, write_curves_csv, JudgeContext, PairJudgement, Rubric,
};
use crate::insights::{
    aggregate_transitions, assign_themes, birth_dates, documents_from_predictions, embed_documents, generate_themes,
    theme_prevalence, write_details_csv, write_transitions_csv, DocMode, Document, Embedder, FixedEmbedder,
    LiveEmbedder, TopicContext,
};
use crate::llm::LiveConfig;
use crate::prompts::PromptLibrary;
use crate::record::{ingest_records, write_records, IngestOptions, PatientRecord};
use crate::synth::{generate, marker_policy_script, SynthConfig};
use crate::tokens::{counter_by_name, TokenCounter};
use crate::util::derive_seed;
use crate::xml::{to_xml, XmlDocument};

pub(super) fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => load_file(p)?,
        None => Value::Null,
    };
    macro_rules! settings {
        ($args:expr, $name:literal) => {{
            let (a, snap) = layer($args, section(&file, $name))?;
            (a, RunManifest::start($name, snap))
        }};
    }
    match &cli.command {
        Command::Synth(a) => {
            let (a, m) = settings!(a, "synth");
            synth(a, m)
        }
        Command::Cohort(a) => {
            let (a, m) = settings!(a, "cohort");
            cohort(a, m)
        }
        Command::Chunk(a) => {
            let (a, m) = settings!(a, "chunk");
            chunk_cmd(a, m)
        }
        Command::Predict(a) => {
            let (a, m) = settings!(a, "predict");
            predict(a, m)
        }
        Command::Judge(a) => {
            let (a, m) = settings!(a, "judge");
            judge(a, m)
        }
        Command::Eval(a) => {
            let (a, m) = settings!(a, "eval");
            eval(a, m)
        }
        Command::Topics(a) => {
            let (a, m) = settings!(a, "topics");
            topics(a, m)
        }
        Command::Transitions(a) => {
            let (a, m) = settings!(a, "transitions");
            transitions(a, m)
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn counter(name: Option<&str>) -> anyhow::Result<Arc<dyn TokenCounter>> {
    let name = name.unwrap_or("default");
    counter_by_name(name).ok_or_else(|| usage(format!("unknown --counter {name:?}")))
}

fn records(path: &Path, opts: IngestOptions) -> anyhow::Result<Vec<PatientRecord>> {
    let report = ingest_records(path, opts)?;
    for e in &report.errors {
        tracing::warn!(path = %path.display(), error = %e, "skipping invalid record");
    }
    if report.records.is_empty() && !report.errors.is_empty() {
        anyhow::bail!("{}: no valid records ({} invalid)", path.display(), report.errors.len());
    }
    Ok(report.records)
}

fn predictions(path: &Path) -> anyhow::Result<Vec<PredictionResult>> {
    read_predictions(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: super::SynthArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let out = required(&a.out, "--out")?;
    let cfg: SynthConfig = serde_json::from_value(m.config.clone()).map_err(|e| usage(format!("invalid synth settings: {e}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let gen = generate(&cfg)?;
    write_records(create(&out)?, &gen.records)?;
    m.output(&out)?;
    if let Some(key) = &a.key {
        write_json(key, &gen.answer_key)?;
        m.output(key)?;
    }
    if let Some(script) = &a.script {
        let mut w = create(script)?;
        w.write_all(marker_policy_script(&cfg).to_yaml().as_bytes())?;
        w.flush()?;
        m.output(script)?;
    }
    m.seeds.insert("run".into(), cfg.seed);
    let cases = gen.answer_key.values().filter(|k| k.label == 1).count();
    println!("wrote {} histories ({cases} with a planted diagnosis) to {}", gen.records.len(), out.display());
    m.finish(&manifest_path(&out))?;
    Ok(())
}

fn cohort(a: super::CohortArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let raw_path = required(&a.records, "--records")?;
    let codes = required(&a.codes, "--codes")?;
    let out = required(&a.out, "--out")?;
    let seed = a.seed.unwrap_or(0);
    let mut cfg = PhenotypeConfig {
        code_set: read_code_set(&codes)?,
        ..PhenotypeConfig::default()
    };
    if cfg.code_set.is_empty() {
        return Err(usage(format!("--codes {}: empty code set", codes.display())));
    }
    cfg.gap_years = a.gap_years.unwrap_or(cfg.gap_years);
    cfg.washout_days = a.washout_days.unwrap_or(cfg.washout_days);
    cfg.pair_window_days = a.pair_window_days.unwrap_or(cfg.pair_window_days);
    cfg.min_visits = a.min_visits.unwrap_or(cfg.min_visits);
    let raw = records(&raw_path, IngestOptions::raw())?;
    let cancer = a.cancer.clone().unwrap_or_else(|| ChainConfig::default().cancer_type);
    let (cohort, report) = build_cohort(&raw, &cfg, &cancer, seed, a.ratio.unwrap_or(1))?;
    let mut all: Vec<&PatientRecord> = cohort.records().collect();
    all.sort_by(|x, y| x.patient_id.cmp(&y.patient_id));
    write_records(create(&out)?, all)?;
    let report_path = with_suffix(&out, ".report.json");
    write_json(&report_path, &report)?;
    m.output(&out)?;
    m.output(&report_path)?;
    m.seeds.insert("run".into(), seed);
    m.seeds.insert("match".into(), derive_seed(seed, "match", ""));
    println!("cohort: {} cases, {} controls -> {}", report.cases, report.controls, out.display());
    m.finish(&manifest_path(&out))?;
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct ChunkedDocument {
    patient_id: Option<String>,
    xml_tokens: usize,
    chunks: Vec<ChunkManifestEntry>,
}

fn write_chunks(dir: &Path, doc: &XmlDocument, limit: usize, counter: &dyn TokenCounter, rel: &str) -> anyhow::Result<Vec<ChunkManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let chunks = chunk(doc, limit, counter)?;
    let mut entries = Vec::with_capacity(chunks.len());
    for c in chunks {
        let name = format!("chunk_{:03}.xml", c.ordinal);
        std::fs::write(dir.join(&name), &c.text)?;
        entries.push(ChunkManifestEntry {
            ordinal: c.ordinal,
            file: if rel.is_empty() { name } else { format!("{rel}/{name}") },
            token_count: c.token_count,
            span_start: c.span.map(|s| s.0),
            span_end: c.span.map(|s| s.1),
            carries_header: c.carries_header,
            split_group: c.split_group,
            oversize: c.oversize,
            event_count: c.event_count,
        });
    }
    Ok(entries)
}

fn chunk_cmd(a: super::ChunkArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let out = required(&a.out, "--out")?;
    let limit = a.limit.unwrap_or(DEFAULT_LIMIT);
    let counter = counter(a.counter.as_deref())?;
    std::fs::create_dir_all(&out)?;
    let mut docs = Vec::new();
    match (&a.input, &a.records) {
        (Some(input), None) => {
            let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let doc = XmlDocument::parse(&text)?;
            let chunks = write_chunks(&out, &doc, limit, counter.as_ref(), "")?;
            docs.push(ChunkedDocument {
                patient_id: None,
                xml_tokens: counter.count(&doc.text),
                chunks,
            });
        }
        (None, Some(path)) => {
            for r in records(path, IngestOptions::raw())? {
                let doc = to_xml(&r);
                let chunks = write_chunks(&out.join(&r.patient_id), &doc, limit, counter.as_ref(), &r.patient_id)?;
                docs.push(ChunkedDocument {
                    patient_id: Some(r.patient_id.clone()),
                    xml_tokens: counter.count(&doc.text),
                    chunks,
                });
            }
        }
        _ => return Err(usage("give exactly one of --in or --records")),
    }
    let total: usize = docs.iter().map(|d| d.chunks.len()).sum();
    write_json(
        &out.join("manifest.json"),
        &json!({"limit": limit, "counter": counter.name(), "documents": docs}),
    )?;
    m.output(&out)?;
    println!("wrote {total} chunks for {} document(s) to {}", docs.len(), out.display());
    m.finish(&out.join("run_manifest.json"))?;
    Ok(())
}

fn parse_kebab<T: for<'de> Deserialize<'de>>(v: &str, flag: &str) -> anyhow::Result<T> {
    serde_json::from_value(Value::String(v.to_string())).map_err(|_| usage(format!("invalid {flag} {v:?}")))
}

fn predict(a: super::PredictArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let cohort_path = required(&a.cohort, "--cohort")?;
    let out = required(&a.out, "--out")?;
    let spec = required(&a.backend, "--backend")?;
    let d = ChainConfig::default();
    let config = ChainConfig {
        cancer_type: a.cancer.clone().unwrap_or(d.cancer_type),
        model: a.model.clone().unwrap_or(d.model),
        chunk_limit: a.limit.unwrap_or(d.chunk_limit),
        memory_k: a.k.unwrap_or(d.memory_k),
        temperature: a.temperature.unwrap_or(d.temperature),
        max_output_tokens: a.max_output_tokens.unwrap_or(d.max_output_tokens),
        reasoning_effort: match &a.reasoning_effort {
            Some(r) => Some(r.parse().map_err(|e: String| usage(format!("--reasoning-effort: {e}")))?),
            None => None,
        },
        failure_policy: match &a.failure_policy {
            Some(p) => parse_kebab::<FailurePolicy>(p, "--failure-policy")?,
            None => d.failure_policy,
        },
        mode: match &a.mode {
            Some(p) => parse_kebab::<Mode>(p, "--mode")?,
            None => d.mode,
        },
        any_cancer: a.any_cancer.clone().filter(|v| !v.is_empty()),
        concurrency: a.concurrency.unwrap_or(d.concurrency).max(1),
    };
    let backend = backend_from_spec(&spec, Some(&config.model))?;
    let mut ctx = ChainContext::new(backend.clone(), config).with_counter(counter(a.counter.as_deref())?);
    if let Some(dir) = &a.prompt_dir {
        ctx = ctx.with_prompts(PromptLibrary::from_dir(dir).map_err(|e| usage(format!("--prompt-dir: {e}")))?);
    }
    let mut recs = records(&cohort_path, IngestOptions::default())?;
    if let Some(n) = a.max_patients {
        recs.truncate(n);
    }
    let opts = RunOptions::to_file(out.clone());
    let run = run_cohort(&recs, &ctx, &opts)?;
    m.backend = Some(backend.identity());
    m.prompt_digests = ctx.prompts.digests();
    m.output(&out)?;
    if let Some(f) = opts.failures_path().filter(|p| p.exists()) {
        m.output(&f)?;
    }
    m.note("patients", recs.len());
    m.note("failures", run.failures.len());
    m.note("resumed", run.resumed);
    println!(
        "predicted {} of {} patients ({} failed, {} resumed) -> {}",
        run.results.len(),
        recs.len(),
        run.failures.len(),
        run.resumed,
        out.display()
    );
    m.finish(&manifest_path(&out))?;
    if run.results.is_empty() && !run.failures.is_empty() {
        anyhow::bail!("every patient failed; see {}", opts.failures_path().unwrap_or_default().display());
    }
    Ok(())
}

fn eval(a: super::EvalArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let preds_path = required(&a.preds, "--preds")?;
    let out = required(&a.out, "--out")?;
    let seed = a.seed.unwrap_or(0);
    let boot = a.boot.unwrap_or(1000);
    let strata = a.strata.clone().unwrap_or_default();
    let preds = predictions(&preds_path)?;
    let outcomes = outcomes_from_predictions(&preds);
    let boot_seed = derive_seed(seed, "bootstrap", "eval");
    let report = evaluate(&outcomes, &strata, boot, boot_seed);
    write_json(&out, &report)?;
    m.output(&out)?;
    if let Some(c) = &a.curves {
        let cs = curves(&outcomes).context("curves need both classes")?;
        write_curves_csv(&cs, create(c)?)?;
        m.output(c)?;
    }
    m.seeds.insert("run".into(), seed);
    m.seeds.insert("bootstrap".into(), boot_seed);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "n={} positives={} auroc={} auprc={}",
        report.overall.n,
        report.overall.n_positive,
        fmt(report.overall.auroc),
        fmt(report.overall.auprc)
    );
    m.finish(&manifest_path(&out))?;
    Ok(())
}

/// What the judge sees of one prediction: the manager's parsed answer.
fn candidate_text(p: &PredictionResult) -> String {
    serde_json::to_string_pretty(&p.manager.raw).expect("json values serialize")
}

fn judge(a: super::JudgeArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let pa = predictions(&required(&a.a, "--a")?)?;
    let pb = predictions(&required(&a.b, "--b")?)?;
    let out = required(&a.out, "--out")?;
    let spec = required(&a.backend, "--backend")?;
    let model = a.model.clone().unwrap_or_else(|| ChainConfig::default().model);
    let backend = backend_from_spec(&spec, Some(&model))?;
    let prompts = match &a.prompt_dir {
        Some(d) => PromptLibrary::from_dir(d).map_err(|e| usage(format!("--prompt-dir: {e}")))?,
        None => PromptLibrary::builtin(),
    };
    let by_id: BTreeMap<&str, &PredictionResult> = pb.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let mut pairs: Vec<PairJudgement> = Vec::new();
    let mut unpaired = Vec::new();
    for x in &pa {
        let Some(y) = by_id.get(x.patient_id.as_str()) else {
            unpaired.push(x.patient_id.clone());
            continue;
        };
        let ctx = JudgeContext {
            backend: backend.clone(),
            prompts: Arc::new(prompts.clone()),
            model: model.clone(),
            cancer_type: a.cancer.clone().unwrap_or_else(|| x.cancer_type.clone()),
            years: a.years.unwrap_or(x.meta.gap_years),
        };
        pairs.push(judge_pair(&ctx, &x.patient_id, &candidate_text(x), &candidate_text(y), x.label)?);
    }
    let n = pairs.len().max(1) as f64;
    let mean_rubric: BTreeMap<Rubric, f64> = Rubric::ALL
        .iter()
        .map(|&r| {
            let s: f64 = pairs
                .iter()
                .flat_map(|p| p.rubric_scores.iter().filter(move |x| x.rubric == r))
                .map(|x| x.score_a)
                .sum();
            (r, s / n)
        })
        .collect();
    let mean_overall_a = pairs.iter().map(|p| p.overall_a).sum::<f64>() / n;
    write_json(
        &out,
        &json!({
            "pairs": pairs,
            "mean_rubric_score_a": mean_rubric,
            "mean_overall_a": mean_overall_a,
            "unpaired": unpaired,
        }),
    )?;
    m.output(&out)?;
    m.backend = Some(backend.identity());
    m.prompt_digests = prompts.digests();
    println!("judged {} pairs; mean overall score of A {mean_overall_a:.3}", pairs.len());
    m.finish(&manifest_path(&out))?;
    Ok(())
}

/// Lines holding either documents or predictions.
fn read_docs(path: &Path, mode: DocMode) -> anyhow::Result<Vec<Document>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if v.get("worker_trace").is_some() {
            let p: PredictionResult = serde_json::from_value(v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            docs.extend(documents_from_predictions(&[p], mode));
        } else {
            docs.push(serde_json::from_value(v).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(docs)
}

fn embedder_from_spec(spec: &str) -> anyhow::Result<Box<dyn Embedder>> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    Ok(match kind {
        "hashing" => Box::new(FixedEmbedder::hashing(if rest.is_empty() {
            64
        } else {
            rest.parse().map_err(|_| usage(format!("invalid --embedder {spec:?}")))?
        })),
        "fixed" => Box::new(FixedEmbedder::load(Path::new(rest))?),
        "live" => Box::new(LiveEmbedder::new(
            LiveConfig::default().with_env(),
            if rest.is_empty() { "text-embedding-3-large" } else { rest },
        )?),
        _ => return Err(usage(format!("unknown --embedder {spec:?}"))),
    })
}

fn topics(a: super::TopicsArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let docs_path = required(&a.docs, "--docs")?;
    let out = required(&a.out, "--out")?;
    let spec = required(&a.backend, "--backend")?;
    let mode: DocMode = parse_kebab(a.mode.as_deref().unwrap_or("summaries"), "--mode")?;
    let (k, n_s, seed) = (a.k.unwrap_or(5), a.sample.unwrap_or(200), a.seed.unwrap_or(0));
    let docs = read_docs(&docs_path, mode)?;
    if docs.is_empty() {
        anyhow::bail!("{}: no documents", docs_path.display());
    }
    let model = a.model.clone().unwrap_or_else(|| ChainConfig::default().model);
    let backend = backend_from_spec(&spec, Some(&model))?;
    let ctx = TopicContext {
        model,
        concurrency: a.concurrency.unwrap_or(4).max(1),
        ..TopicContext::new(backend.clone())
    };
    let mut by_type: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    for d in &docs {
        by_type.entry(d.cancer_type.clone()).or_default().push(d.clone());
    }
    let mut result = serde_json::Map::new();
    for (ct, group) in &by_type {
        let themes = generate_themes(&ctx, group, n_s, k, seed).with_context(|| format!("themes for {ct}"))?;
        let assignments = assign_themes(&ctx, group, &themes, a.batch_size.unwrap_or(20))
            .with_context(|| format!("assignment for {ct}"))?;
        let prevalence = theme_prevalence(&assignments, &themes);
        result.insert(
            ct.clone(),
            json!({"documents": group.len(), "themes": themes, "prevalence": prevalence, "assignments": assignments}),
        );
    }
    write_json(&out, &Value::Object(result))?;
    m.output(&out)?;
    if let Some(e) = &a.embed_out {
        let embedder = embedder_from_spec(a.embedder.as_deref().unwrap_or("hashing:64"))?;
        let emb = embed_documents(embedder.as_ref(), &docs, 64)?;
        emb.write_csv(create(e)?)?;
        m.output(e)?;
        m.note("embedder", embedder.identity());
    }
    m.backend = Some(backend.identity());
    m.prompt_digests = ctx.prompts.digests();
    m.seeds.insert("run".into(), seed);
    println!("{} documents, {} cancer type(s), {k} themes each -> {}", docs.len(), by_type.len(), out.display());
    m.finish(&manifest_path(&out))?;
    Ok(())
}

fn transitions(a: super::TransitionsArgs, mut m: RunManifest) -> anyhow::Result<()> {
    let preds = predictions(&required(&a.preds, "--preds")?)?;
    let out = required(&a.out, "--out")?;
    let table = aggregate_transitions(&preds, &birth_dates(&preds), a.band_width.unwrap_or(5));
    write_transitions_csv(&table.transitions, create(&out)?)?;
    m.output(&out)?;
    if let Some(d) = &a.details {
        write_details_csv(&table.details, create(d)?)?;
        m.output(d)?;
    }
    m.note("patients", table.patients);
    m.note("skipped_missing_birth_date", table.skipped_missing_birth_date);
    println!(
        "{} transitions over {} patients ({} skipped) -> {}",
        table.details.len(),
        table.patients,
        table.skipped_missing_birth_date,
        out.display()
    );
    m.finish(&manifest_path(&out))?;
    Ok(())
}
