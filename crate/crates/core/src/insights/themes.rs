use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::PredictionResult;
use crate::llm::{extract_json, BackendError, ChatBackend, ChatRequest};
use crate::prompts::{Bindings, PromptError, PromptLibrary, TemplateName};
use crate::util::derive_seed;

/// Label of the bucket for documents no theme matched.
pub const OTHER: &str = "Other";

/// One unit of text for topic modeling: a single event or a patient's
/// concatenated event list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub cancer_type: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocMode {
    /// One document per final manager event.
    Events,
    /// One document per patient, its final events joined by newlines.
    Summaries,
}

/// Documents from the manager's final events of each prediction. Empty
/// events and patients without events produce no documents.
pub fn documents_from_predictions(preds: &[PredictionResult], mode: DocMode) -> Vec<Document> {
    let mut docs = Vec::new();
    for p in preds {
        let events: Vec<&str> = p
            .manager
            .final_events
            .iter()
            .map(|e| e.trim())
            .filter(|e| !e.is_empty())
            .collect();
        match mode {
            DocMode::Events => docs.extend(events.iter().enumerate().map(|(i, e)| Document {
                doc_id: format!("{}#{}", p.patient_id, i + 1),
                text: e.to_string(),
                cancer_type: p.cancer_type.clone(),
            })),
            DocMode::Summaries if !events.is_empty() => docs.push(Document {
                doc_id: p.patient_id.clone(),
                text: events.join("\n"),
                cancer_type: p.cancer_type.clone(),
            }),
            DocMode::Summaries => {}
        }
    }
    docs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeAssignment {
    pub doc_id: String,
    /// Subset of the generated labels; empty means the Other bucket.
    pub themes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ThemeError {
    #[error("no documents")]
    NoDocuments,
    #[error("documents mix cancer types {0:?} and {1:?}")]
    MixedCancerTypes(String, String),
    #[error("document {0} has empty text")]
    EmptyDocument(String),
    #[error("k_h and n_s must be positive")]
    BadSize,
    #[error("no themes to assign")]
    NoThemes,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("topic backend: {0}")]
    Backend(#[from] BackendError),
    #[error("theme list unusable after re-ask: {message}")]
    Themes { message: String, raw: String },
    #[error("batch {batch}: assignment reply unusable after re-ask: {message}")]
    Assignment { batch: usize, message: String, raw: String },
}

#[derive(Clone)]
pub struct TopicContext {
    pub backend: Arc<dyn ChatBackend>,
    pub prompts: Arc<PromptLibrary>,
    pub model: String,
    pub max_output_tokens: u32,
    /// Parallel assignment batches.
    pub concurrency: usize,
}

impl TopicContext {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            prompts: Arc::new(PromptLibrary::builtin()),
            model: String::new(),
            max_output_tokens: 4096,
            concurrency: 4,
        }
    }

    fn request(&self, name: TemplateName, b: &Bindings) -> Result<ChatRequest, PromptError> {
        let (system, user) = self.prompts.get(name).render(b)?;
        let mut req = ChatRequest::new(self.model.clone(), system, user);
        req.max_output_tokens = self.max_output_tokens;
        Ok(req)
    }
}

fn cancer_type_of(docs: &[Document]) -> Result<&str, ThemeError> {
    let first = docs.first().ok_or(ThemeError::NoDocuments)?;
    for d in docs {
        if d.text.trim().is_empty() {
            return Err(ThemeError::EmptyDocument(d.doc_id.clone()));
        }
        if d.cancer_type != first.cancer_type {
            return Err(ThemeError::MixedCancerTypes(first.cancer_type.clone(), d.cancer_type.clone()));
        }
    }
    Ok(&first.cancer_type)
}

/// Indices of the seeded theme-generation sample, in document order.
/// A request larger than the corpus takes every document.
pub fn sample_indices(n_docs: usize, n_s: usize, seed: u64, cancer_type: &str) -> Vec<usize> {
    if n_s >= n_docs {
        return (0..n_docs).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "theme-sample", cancer_type));
    let mut idx = sample(&mut rng, n_docs, n_s).into_vec();
    idx.sort_unstable();
    idx
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Exactly `k_h` distinct labels of 3 to 8 words.
pub fn parse_theme_list(text: &str, k_h: usize) -> Result<Vec<String>, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let items = v.as_array().ok_or("expected a JSON list")?;
    let mut labels: Vec<String> = Vec::with_capacity(items.len());
    for it in items {
        let s = it.as_str().ok_or("theme labels must be strings")?;
        let label = s.split_whitespace().collect::<Vec<_>>().join(" ");
        let n = word_count(&label);
        if !(3..=8).contains(&n) {
            return Err(format!("theme {label:?} has {n} words, expected 3-8"));
        }
        if labels.iter().any(|l| l.eq_ignore_ascii_case(&label)) || label.eq_ignore_ascii_case(OTHER) {
            return Err(format!("theme {label:?} repeated or reserved"));
        }
        labels.push(label);
    }
    if labels.len() != k_h {
        return Err(format!("expected {k_h} themes, got {}", labels.len()));
    }
    Ok(labels)
}

fn render_documents(docs: &[&Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("Patient {}:\n{}", i + 1, d.text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Discover the `k_h` most common themes from a seeded sample of `n_s`
/// documents. A reply with the wrong number or shape of labels is re-asked
/// once.
pub fn generate_themes(
    ctx: &TopicContext,
    docs: &[Document],
    n_s: usize,
    k_h: usize,
    seed: u64,
) -> Result<Vec<String>, ThemeError> {
    if n_s == 0 || k_h == 0 {
        return Err(ThemeError::BadSize);
    }
    let cancer_type = cancer_type_of(docs)?;
    let picked: Vec<&Document> = sample_indices(docs.len(), n_s, seed, cancer_type)
        .into_iter()
        .map(|i| &docs[i])
        .collect();
    let b = Bindings::new()
        .set("cancer_type", cancer_type)
        .set("num_themes", k_h.to_string())
        .set("documents", render_documents(&picked));
    let req = ctx.request(TemplateName::ThemeGeneration, &b)?;
    let mut last = (String::new(), String::new());
    for _ in 0..2 {
        let text = ctx.backend.complete(&req)?.text;
        match parse_theme_list(&text, k_h) {
            Ok(labels) => return Ok(labels),
            Err(m) => last = (m, text),
        }
    }
    Err(ThemeError::Themes {
        message: last.0,
        raw: last.1,
    })
}

/// `id → themes` from one assignment reply. Unknown theme labels are
/// dropped; known ones are mapped to their canonical spelling.
fn parse_assignment(text: &str, themes: &[String]) -> Result<BTreeMap<u64, Vec<String>>, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let items = v.as_array().ok_or("expected a JSON list")?;
    let mut out = BTreeMap::new();
    for it in items {
        let id = match it.get("id") {
            Some(Value::Number(n)) => n.as_u64(),
            Some(Value::String(s)) => s.trim().parse().ok(),
            _ => None,
        }
        .ok_or("every item needs an integer id")?;
        let labels = it.get("themes").and_then(Value::as_array).ok_or("every item needs a themes list")?;
        let mut picked: Vec<String> = Vec::new();
        for l in labels.iter().filter_map(Value::as_str) {
            let l = l.split_whitespace().collect::<Vec<_>>().join(" ");
            match themes.iter().find(|t| t.eq_ignore_ascii_case(&l)) {
                Some(t) if !picked.contains(t) => picked.push(t.clone()),
                Some(_) => {}
                None => tracing::warn!(theme = %l, "dropping label outside the generated set"),
            }
        }
        // keep generated order so assignments are comparable
        picked.sort_by_key(|p| themes.iter().position(|t| t == p));
        out.insert(id, picked);
    }
    Ok(out)
}

fn ask_assignment(
    ctx: &TopicContext,
    batch: usize,
    docs: &[(u64, &Document)],
    themes: &[String],
    cancer_type: &str,
) -> Result<BTreeMap<u64, Vec<String>>, ThemeError> {
    let patients: Vec<Value> = docs.iter().map(|(id, d)| json!({"id": id, "summary": d.text})).collect();
    let themes_list = themes
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let b = Bindings::new()
        .set("cancer_type", cancer_type)
        .set("num_themes", themes.len().to_string())
        .set("themes_list", themes_list)
        .set("patients_json", serde_json::to_string_pretty(&patients).expect("json values serialize"));
    let req = ctx.request(TemplateName::ThemeAssignment, &b)?;
    let mut last = (String::new(), String::new());
    for _ in 0..2 {
        let text = ctx.backend.complete(&req)?.text;
        match parse_assignment(&text, themes) {
            Ok(m) => return Ok(m),
            Err(m) => last = (m, text),
        }
    }
    Err(ThemeError::Assignment {
        batch,
        message: last.0,
        raw: last.1,
    })
}

fn assign_batch(
    ctx: &TopicContext,
    batch: usize,
    docs: &[Document],
    themes: &[String],
    cancer_type: &str,
) -> Result<Vec<ThemeAssignment>, ThemeError> {
    // ids are 1-based positions within the batch
    let numbered: Vec<(u64, &Document)> = docs.iter().enumerate().map(|(i, d)| (i as u64 + 1, d)).collect();
    let mut got = ask_assignment(ctx, batch, &numbered, themes, cancer_type)?;
    let missing: Vec<(u64, &Document)> = numbered.iter().filter(|(id, _)| !got.contains_key(id)).cloned().collect();
    if !missing.is_empty() {
        tracing::warn!(batch, missing = missing.len(), "re-asking documents absent from the reply");
        let again = ask_assignment(ctx, batch, &missing, themes, cancer_type)?;
        for (id, _) in &missing {
            if let Some(t) = again.get(id) {
                got.insert(*id, t.clone());
            }
        }
    }
    Ok(numbered
        .iter()
        .map(|(id, d)| ThemeAssignment {
            doc_id: d.doc_id.clone(),
            themes: got.get(id).cloned().unwrap_or_default(),
        })
        .collect())
}

/// Tag every document with the subset of `themes` it mentions, in batches
/// of `batch_size`. Output order follows `docs`.
pub fn assign_themes(
    ctx: &TopicContext,
    docs: &[Document],
    themes: &[String],
    batch_size: usize,
) -> Result<Vec<ThemeAssignment>, ThemeError> {
    if themes.is_empty() {
        return Err(ThemeError::NoThemes);
    }
    if batch_size == 0 {
        return Err(ThemeError::BadSize);
    }
    let cancer_type = cancer_type_of(docs)?;
    let batches: Vec<&[Document]> = docs.chunks(batch_size).collect();
    type Slot = Option<Result<Vec<ThemeAssignment>, ThemeError>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..ctx.concurrency.clamp(1, batches.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(batch) = batches.get(i) else { break };
                let r = assign_batch(ctx, i, batch, themes, cancer_type);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(docs.len());
    for r in results.into_inner().expect("results lock") {
        out.extend(r.expect("every batch ran")?);
    }
    Ok(out)
}

/// Documents per theme plus the Other bucket. Multi-label documents count
/// once for each of their themes.
pub fn theme_prevalence(assignments: &[ThemeAssignment], themes: &[String]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = themes.iter().map(|t| (t.clone(), 0)).collect();
    counts.insert(OTHER.into(), 0);
    for a in assignments {
        let distinct: BTreeSet<&String> = a.themes.iter().collect();
        if distinct.is_empty() {
            *counts.get_mut(OTHER).expect("other present") += 1;
        }
        for t in distinct {
            if let Some(c) = counts.get_mut(t) {
                *c += 1;
            }
        }
    }
    counts
}
