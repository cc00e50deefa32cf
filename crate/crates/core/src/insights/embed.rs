use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::themes::Document;
use crate::llm::{BackendError, LiveBackend, LiveConfig};
use crate::util::{median, sha256_hex};

/// Text-embedding client.
pub trait Embedder: Send + Sync {
    /// One vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;

    fn identity(&self) -> String;
}

/// Offline embedder. Texts listed in the table get their fixed vector;
/// anything else gets a hashed bag-of-words vector, so identical texts map
/// to identical vectors and shared words raise cosine similarity.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
}

impl FixedEmbedder {
    pub fn hashing(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn with(mut self, text: impl Into<String>, v: Vec<f64>) -> Self {
        self.table.insert(text.into(), v);
        self
    }

    /// JSON object of `text → vector`; `dim` is taken from the first entry.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let table: HashMap<String, Vec<f64>> =
            serde_json::from_str(&raw).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let dim = table.values().next().map_or(64, Vec::len);
        Ok(Self { dim, table })
    }

    fn hashed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = sha256_hex(w.to_lowercase().as_bytes());
            let bucket = u64::from_str_radix(&h[..15], 16).expect("hex digest") as usize % self.dim.max(1);
            v[bucket] += 1.0;
        }
        v
    }
}

impl Embedder for FixedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if self.dim == 0 && self.table.is_empty() {
            return Err(BackendError::Config("embedding dimension must be positive".into()));
        }
        Ok(texts
            .iter()
            .map(|t| self.table.get(t).cloned().unwrap_or_else(|| self.hashed(t)))
            .collect())
    }

    fn identity(&self) -> String {
        format!("fixed:{}d/{}", self.dim, self.table.len())
    }
}

/// OpenAI-compatible `/embeddings` client sharing the chat client's retry
/// policy.
pub struct LiveEmbedder {
    inner: LiveBackend,
    model: String,
}

impl LiveEmbedder {
    pub fn new(config: LiveConfig, model: impl Into<String>) -> Result<Self, BackendError> {
        Ok(Self {
            inner: LiveBackend::new(config)?,
            model: model.into(),
        })
    }
}

fn decode_embeddings(text: &str, n: usize) -> Result<Vec<Vec<f64>>, BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::Decode(e.to_string()))?;
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Decode("missing data".into()))?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    for (pos, item) in data.iter().enumerate() {
        let i = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let vec: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Decode(format!("item {i} has no embedding")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Decode("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        *out
            .get_mut(i)
            .ok_or_else(|| BackendError::Decode(format!("index {i} out of range")))? = Some(vec);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| BackendError::Decode(format!("no embedding for input {i}"))))
        .collect()
}

impl Embedder for LiveEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let (text, _) = self.inner.post("embeddings", &json!({"model": self.model, "input": texts}))?;
        decode_embeddings(&text, texts.len())
    }

    fn identity(&self) -> String {
        format!("live-embed:{}@{}", self.model, self.inner.config().api_base)
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend: {0}")]
    Backend(#[from] BackendError),
    #[error("document {doc_id} embedded with dimension {got}, expected {expected}")]
    DimensionMismatch { doc_id: String, expected: usize, got: usize },
    #[error("backend returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding of {0} is empty or not finite")]
    BadVector(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub doc_ids: Vec<String>,
    pub cancer_types: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// CSV with columns `doc_id,cancer_type,v_1..v_d`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EmbedError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["doc_id".to_string(), "cancer_type".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("v_{i}")));
        wr.write_record(&header)?;
        for ((id, ct), v) in self.doc_ids.iter().zip(&self.cancer_types).zip(&self.vectors) {
            let mut row = vec![id.clone(), ct.clone()];
            row.extend(v.iter().map(f64::to_string));
            wr.write_record(&row)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Embed every document in batches of `batch_size`; all vectors must share
/// one dimension.
pub fn embed_documents(embedder: &dyn Embedder, docs: &[Document], batch_size: usize) -> Result<Embeddings, EmbedError> {
    let mut out = Embeddings {
        doc_ids: Vec::with_capacity(docs.len()),
        cancer_types: Vec::with_capacity(docs.len()),
        vectors: Vec::with_capacity(docs.len()),
    };
    for batch in docs.chunks(batch_size.max(1)) {
        let texts: Vec<String> = batch.iter().map(|d| d.text.clone()).collect();
        let vs = embedder.embed(&texts)?;
        if vs.len() != batch.len() {
            return Err(EmbedError::CountMismatch {
                expected: batch.len(),
                got: vs.len(),
            });
        }
        for (d, v) in batch.iter().zip(vs) {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::BadVector(d.doc_id.clone()));
            }
            if let Some(first) = out.vectors.first() {
                if first.len() != v.len() {
                    return Err(EmbedError::DimensionMismatch {
                        doc_id: d.doc_id.clone(),
                        expected: first.len(),
                        got: v.len(),
                    });
                }
            }
            out.doc_ids.push(d.doc_id.clone());
            out.cancer_types.push(d.cancer_type.clone());
            out.vectors.push(v);
        }
    }
    Ok(out)
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    /// Median cosine over unordered pairs sharing a cancer type.
    pub within_median: Option<f64>,
    /// Median cosine over unordered pairs of different types.
    pub cross_median: Option<f64>,
    pub per_type_within: BTreeMap<String, f64>,
}

pub fn similarity_summary(e: &Embeddings) -> SimilaritySummary {
    let mut within = Vec::new();
    let mut cross = Vec::new();
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..e.vectors.len() {
        for j in i + 1..e.vectors.len() {
            let c = cosine(&e.vectors[i], &e.vectors[j]);
            if e.cancer_types[i] == e.cancer_types[j] {
                within.push(c);
                per.entry(e.cancer_types[i].clone()).or_default().push(c);
            } else {
                cross.push(c);
            }
        }
    }
    SimilaritySummary {
        within_median: median(&mut within),
        cross_median: median(&mut cross),
        per_type_within: per
            .into_iter()
            .filter_map(|(k, mut v)| median(&mut v).map(|m| (k, m)))
            .collect(),
    }
}
