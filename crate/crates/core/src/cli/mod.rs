//! The `trajchain` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing
//! required settings, unreadable config), 2 when the run itself fails.
//! Logs go to stderr as JSON lines; `--log-level` or `TRAJCHAIN_LOG` sets
//! the filter.

mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::policy::Policy;
use crate::llm::{ChatBackend, LiveBackend, LiveConfig, ScriptedBackend};

pub use manifest::{manifest_path, RunManifest};

/// Bad invocation: reported with exit code 1.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Value of a setting that may come from a flag, the environment or the
/// config file, or a usage error naming the flag.
pub(crate) fn required<T: Clone>(v: &Option<T>, flag: &str) -> anyhow::Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required {flag}")))
}

#[derive(Debug, Parser)]
#[command(name = "trajchain", version, about = "Chain-of-agents risk prediction over longitudinal patient records")]
pub struct Cli {
    /// Settings file (TOML, YAML or JSON; a run manifest also works).
    /// Top-level keys apply to every command, a table named after the
    /// command overrides them.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `trajchain=debug`.
    #[arg(long, global = true, env = "TRAJCHAIN_LOG", default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic histories, an answer key and a marker script.
    Synth(SynthArgs),
    /// Phenotype raw histories into a matched case-control cohort.
    Cohort(CohortArgs),
    /// Convert to XML and write time-aware chunks with a manifest.
    Chunk(ChunkArgs),
    /// Run the agent chain over a cohort.
    Predict(PredictArgs),
    /// Compare two prediction runs with the pairwise judge.
    Judge(JudgeArgs),
    /// AUROC/AUPRC with bootstrap intervals and strata.
    Eval(EvalArgs),
    /// Discover themes in events or summaries and tag every document.
    Topics(TopicsArgs),
    /// Age-banded risk-state transitions for Sankey diagrams.
    Transitions(TransitionsArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    /// Raw histories (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Answer key (JSON).
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Marker-policy script for the scripted backend (YAML).
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_cases: Option<usize>,
    #[arg(long)]
    pub n_controls: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortArgs {
    /// Raw histories (JSON lines).
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Newline-delimited diagnosis code set.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_GAP_YEARS")]
    pub gap_years: Option<f64>,
    #[arg(long, env = "TRAJCHAIN_SEED")]
    pub seed: Option<u64>,
    /// Cohort records (JSON lines); a `.report.json` is written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Controls per case.
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long, env = "TRAJCHAIN_CANCER")]
    pub cancer: Option<String>,
    #[arg(long)]
    pub washout_days: Option<i64>,
    #[arg(long)]
    pub pair_window_days: Option<i64>,
    #[arg(long)]
    pub min_visits: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkArgs {
    /// One XML document.
    #[arg(long = "in", conflicts_with = "records")]
    pub input: Option<PathBuf>,
    /// Records (JSON lines); one sub-directory per patient.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Chunk limit in tokens.
    #[arg(long, env = "TRAJCHAIN_LIMIT")]
    pub limit: Option<usize>,
    /// `default` (word approximation) or `cl100k`.
    #[arg(long, env = "TRAJCHAIN_COUNTER")]
    pub counter: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictArgs {
    /// Cohort records (JSON lines).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_CANCER")]
    pub cancer: Option<String>,
    /// `scripted:<file>`, `echo`, `marker:<m1,m2,...>` or `live[:<model>]`.
    #[arg(long, env = "TRAJCHAIN_BACKEND")]
    pub backend: Option<String>,
    /// Chunk limit in tokens.
    #[arg(long, env = "TRAJCHAIN_LIMIT")]
    pub limit: Option<usize>,
    /// Memory entries shown to each subsequent worker.
    #[arg(long, env = "TRAJCHAIN_K")]
    pub k: Option<usize>,
    /// Predictions (JSON lines). Patients already present are skipped.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `one-stage` or `two-stage`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Directory of template overrides.
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_CONCURRENCY")]
    pub concurrency: Option<usize>,
    /// `abort` or `carry-forward`.
    #[arg(long)]
    pub failure_policy: Option<String>,
    #[arg(long, env = "TRAJCHAIN_COUNTER")]
    pub counter: Option<String>,
    #[arg(long, env = "TRAJCHAIN_MODEL")]
    pub model: Option<String>,
    /// Candidate cancers for the max-pooling templates (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub any_cancer: Option<Vec<String>>,
    /// Only the first N patients of the cohort file.
    #[arg(long)]
    pub max_patients: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    /// `low`, `medium` or `high`; omits temperature from requests.
    #[arg(long)]
    pub reasoning_effort: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeArgs {
    /// Predictions shown as candidate A.
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Predictions shown as candidate B.
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_BACKEND")]
    pub backend: Option<String>,
    /// Judgements and mean scores (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "TRAJCHAIN_CANCER")]
    pub cancer: Option<String>,
    /// Prediction horizon stated to the judge.
    #[arg(long)]
    pub years: Option<f64>,
    #[arg(long, env = "TRAJCHAIN_MODEL")]
    pub model: Option<String>,
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ROC and PR points (CSV).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Bootstrap resamples; 0 disables intervals.
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long, env = "TRAJCHAIN_SEED")]
    pub seed: Option<u64>,
    /// Stratum keys: age_band, sex, cancer_type, visit_quartile.
    #[arg(long, value_delimiter = ',')]
    pub strata: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicsArgs {
    /// Documents or predictions (JSON lines).
    #[arg(long)]
    pub docs: Option<PathBuf>,
    /// `events` or `summaries`, used when the input holds predictions.
    #[arg(long)]
    pub mode: Option<String>,
    /// Themes per cancer type.
    #[arg(long)]
    pub k: Option<usize>,
    /// Documents sampled for theme generation.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, env = "TRAJCHAIN_BACKEND")]
    pub backend: Option<String>,
    /// Themes, assignments and prevalence (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, env = "TRAJCHAIN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "TRAJCHAIN_MODEL")]
    pub model: Option<String>,
    #[arg(long, env = "TRAJCHAIN_CONCURRENCY")]
    pub concurrency: Option<usize>,
    /// Also write document embeddings (CSV) here.
    #[arg(long)]
    pub embed_out: Option<PathBuf>,
    /// `hashing:<dim>`, `fixed:<file>` or `live:<model>`.
    #[arg(long)]
    pub embedder: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionsArgs {
    #[arg(long)]
    pub preds: Option<PathBuf>,
    /// Sankey edges (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Age band width in years.
    #[arg(long)]
    pub band_width: Option<i32>,
    /// Per-step rows with worker reasoning (CSV).
    #[arg(long)]
    pub details: Option<PathBuf>,
}

/// Resolve a `--backend` spec.
pub fn backend_from_spec(spec: &str, model: Option<&str>) -> anyhow::Result<Arc<dyn ChatBackend>> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    Ok(match kind {
        "scripted" if !rest.is_empty() => Arc::new(
            ScriptedBackend::from_path(std::path::Path::new(rest)).map_err(|e| usage(format!("--backend: {e}")))?,
        ),
        "echo" => Arc::new(ScriptedBackend::with_policy(Policy::Echo)),
        "marker" if !rest.is_empty() => Arc::new(ScriptedBackend::with_policy(Policy::Marker {
            markers: rest.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect(),
        })),
        "live" => {
            let mut cfg = LiveConfig::default().with_env();
            if !rest.is_empty() {
                cfg.model = rest.to_string();
            } else if let Some(m) = model {
                cfg.model = m.to_string();
            }
            Arc::new(LiveBackend::new(cfg)?)
        }
        _ => return Err(usage(format!("unknown --backend {spec:?}; expected scripted:<file>, echo, marker:<list> or live"))),
    })
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    // a second init in the same process (tests) keeps the first subscriber
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(&cli.log_level);
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "run failed");
            eprintln!("error: {e:#}");
            2
        }
    }
}
