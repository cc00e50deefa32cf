//! Two-stage variant: a parallel wave of preprocessor agents filters every
//! chunk, the filtered XML is re-chunked with the same limit, and the usual
//! worker chain runs over the (fewer) new chunks.
//!
//! With `C` original chunks and a mean reduction factor `q`, the chain needs
//! `1 + C/q + 1` sequential calls instead of `C + 1`, so the variant is
//! faster once `C > q / (q - 1)`.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, ChainContext};
use crate::chunk::{chunk, Chunk, ChunkError};
use crate::prompts::TemplateName;
use crate::record::Modality;
use crate::tokens::TokenCounter;
use crate::xml::{escape, VisitGroup, XmlDocument};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedChunk {
    pub source_ordinal: usize,
    /// Canonical filtered fragment in the codec grammar.
    pub filtered_xml: String,
    #[serde(skip)]
    pub groups: Vec<VisitGroup>,
    #[serde(skip)]
    pub header: Option<String>,
    pub input_tokens: usize,
    pub output_tokens: usize,
    /// `input_tokens / max(output_tokens, 1)`.
    pub reduction_q: f64,
    /// The original chunk was kept because the call or its output failed.
    pub passed_through: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    /// Original chunk count `C`.
    pub c: usize,
    /// Chunk count after filtering and re-chunking.
    pub c_new: usize,
    pub mean_q: f64,
    pub passed_through: usize,
    /// Every chunk was filtered to nothing, so the chain ran on the
    /// original chunks.
    pub fell_back: bool,
    pub sequential_calls_one_stage: usize,
    pub sequential_calls_two_stage: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum LawError {
    #[error("no break-even point for q = {0}: filtering must shrink the input (q > 1)")]
    NoBreakEven(f64),
}

/// Chunk count above which two-stage needs fewer sequential calls.
pub fn break_even_chunks(q: f64) -> Result<f64, LawError> {
    if q.is_nan() || q <= 1.0 {
        return Err(LawError::NoBreakEven(q));
    }
    Ok(q / (q - 1.0))
}

/// `C / (1 + C/q)`: ratio of one-stage to two-stage chain length, ignoring
/// the manager call.
pub fn relative_gain(c: f64, q: f64) -> f64 {
    c / (1.0 + c / q)
}

/// Sequential model calls `(one-stage, two-stage)` under the idealized law
/// `C_new = C / q`.
pub fn modeled_sequential_calls(c: f64, q: f64) -> (f64, f64) {
    (c + 1.0, 1.0 + c / q + 1.0)
}

/// Sequential model calls for observed chunk counts.
pub fn sequential_calls(c: usize, c_new: usize) -> (usize, usize) {
    (c + 1, 1 + c_new + 1)
}

/// Simulated wall time with uniform per-call latency `tau` and unbounded
/// parallelism within the preprocessing wave.
pub fn simulated_wall_time(c: usize, c_new: usize, tau: f64) -> (f64, f64) {
    let (one, two) = sequential_calls(c, c_new);
    (tau * one as f64, tau * two as f64)
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let body = rest.split_once('\n').map_or("", |(_, b)| b);
        return body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    t
}

/// Canonicalize a preprocessor reply against its source chunk. Rejects
/// anything that is not a `<patient>` fragment whose visits and events all
/// occur in the source.
fn canonicalize(reply: &str, source: &XmlDocument) -> Result<(Option<String>, Vec<VisitGroup>), String> {
    let doc = roxmltree::Document::parse(strip_fences(reply)).map_err(|e| format!("malformed XML: {e}"))?;
    let root = doc.root_element();
    if root.tag_name().name() != "patient" {
        return Err(format!("root is <{}>", root.tag_name().name()));
    }
    let source_groups = source.groups();
    let allowed: BTreeSet<(NaiveDate, &str)> = source_groups
        .iter()
        .flat_map(|g| g.events.iter().map(move |e| (g.date, e.as_str())))
        .collect();
    let mut header = None;
    let mut groups: Vec<VisitGroup> = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "demographics" => header = Some(format!("  {}\n", canonical_element(node))),
            "visit" => {
                let date = node
                    .attribute("date")
                    .and_then(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
                    .ok_or("visit without a valid date")?;
                let mut events = Vec::new();
                for ev in node.children().filter(|n| n.is_element()) {
                    if Modality::parse(ev.tag_name().name()).is_none() {
                        return Err(format!("unknown event element <{}>", ev.tag_name().name()));
                    }
                    let line = canonical_element(ev);
                    if !allowed.contains(&(date, line.as_str())) {
                        return Err(format!("event not in source visit {date}: {line}"));
                    }
                    events.push(line);
                }
                if events.is_empty() {
                    continue;
                }
                match groups.last_mut() {
                    Some(g) if g.date == date => g.events.extend(events),
                    Some(g) if g.date > date => return Err(format!("visit {date} out of order")),
                    _ => groups.push(VisitGroup { date, events }),
                }
            }
            other => return Err(format!("unexpected element <{other}>")),
        }
    }
    Ok((header, groups))
}

fn canonical_element(node: roxmltree::Node) -> String {
    let mut attrs: Vec<(&str, &str)> = node.attributes().map(|a| (a.name(), a.value())).collect();
    attrs.sort();
    let mut s = format!("<{}", node.tag_name().name());
    for (k, v) in attrs {
        s.push_str(&format!(" {k}=\"{}\"", escape(v)));
    }
    s.push_str("/>");
    s
}

fn preprocess_one(ctx: &ChainContext, c: &Chunk) -> Result<PreprocessedChunk, AgentError> {
    let source = XmlDocument::parse(&c.text).expect("chunks are in the codec grammar");
    let input_tokens = ctx.counter.count(&c.text);
    let b = ctx
        .base_bindings()
        .set("chunk_xml", c.text.strip_suffix('\n').unwrap_or(&c.text));
    let req = ctx.request(TemplateName::Preprocessor, &b)?;
    let outcome = ctx
        .backend
        .complete(&req)
        .map_err(|e| e.to_string())
        .and_then(|r| canonicalize(&r.text, &source));
    let (header, groups, passed_through, warning) = match outcome {
        Ok((h, g)) => (h, g, false, None),
        Err(w) => {
            tracing::warn!(ordinal = c.ordinal, warning = %w, "preprocessor output rejected; keeping chunk");
            let h = c.carries_header.then(|| source.header().to_string());
            (h, source.groups(), true, Some(format!("chunk {}: {w}", c.ordinal)))
        }
    };
    let filtered_xml = XmlDocument::assemble(header.as_deref().unwrap_or(""), &groups).text;
    let output_tokens = ctx.counter.count(&filtered_xml);
    Ok(PreprocessedChunk {
        source_ordinal: c.ordinal,
        filtered_xml,
        groups,
        header,
        input_tokens,
        output_tokens,
        reduction_q: input_tokens as f64 / output_tokens.max(1) as f64,
        passed_through,
        warning,
    })
}

/// Filter every chunk independently, up to `ctx.config.concurrency` calls
/// at once. Model errors and invalid outputs fall back to the original
/// chunk.
pub fn preprocess_chunks(ctx: &ChainContext, chunks: &[Chunk]) -> Result<Vec<PreprocessedChunk>, AgentError> {
    let slots: Vec<Mutex<Option<Result<PreprocessedChunk, AgentError>>>> =
        chunks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..ctx.config.concurrency.max(1).min(chunks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = chunks.get(i) else { break };
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(preprocess_one(ctx, c));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
        .collect()
}

/// Concatenate filtered fragments in source order and chunk again with the
/// same limit. The demographics header comes from `header`, the original
/// document's.
pub fn reassemble_and_rechunk(
    pre: &[PreprocessedChunk],
    header: &str,
    limit: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<Chunk>, ChunkError> {
    let mut groups: Vec<VisitGroup> = Vec::new();
    for p in pre {
        for g in &p.groups {
            match groups.last_mut() {
                Some(last) if last.date == g.date => last.events.extend(g.events.iter().cloned()),
                _ => groups.push(g.clone()),
            }
        }
    }
    if groups.is_empty() {
        return Ok(Vec::new());
    }
    chunk(&XmlDocument::assemble(header, &groups), limit, counter)
}

/// Run the preprocessing wave and re-chunk; falls back to `chunks` when
/// nothing survives filtering.
pub fn two_stage_chunks(
    ctx: &ChainContext,
    doc: &XmlDocument,
    chunks: Vec<Chunk>,
) -> Result<(Vec<Chunk>, TwoStageReport), AgentError> {
    let pre = preprocess_chunks(ctx, &chunks)?;
    let rechunked = reassemble_and_rechunk(&pre, doc.header(), ctx.config.chunk_limit, ctx.counter.as_ref())?;
    let c = chunks.len();
    let c_new = rechunked.len();
    let mut warnings: Vec<String> = pre.iter().filter_map(|p| p.warning.clone()).collect();
    let fell_back = c_new == 0;
    if fell_back {
        warnings.push("all chunks filtered to empty; running one-stage".into());
        tracing::warn!("two-stage produced no chunks; falling back to one-stage");
    }
    let mean_q = pre.iter().map(|p| p.reduction_q).sum::<f64>() / pre.len().max(1) as f64;
    let (one, two) = sequential_calls(c, if fell_back { c } else { c_new });
    let report = TwoStageReport {
        c,
        c_new,
        mean_q,
        passed_through: pre.iter().filter(|p| p.passed_through).count(),
        fell_back,
        sequential_calls_one_stage: one,
        sequential_calls_two_stage: two,
        warnings,
    };
    Ok((if fell_back { chunks } else { rechunked }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn laws() {
        assert_eq!(break_even_chunks(2.0).unwrap(), 2.0);
        assert_relative_eq!(break_even_chunks(1.5).unwrap(), 3.0, epsilon = 1e-12);
        assert_relative_eq!(break_even_chunks(1000.0).unwrap(), 1000.0 / 999.0);
        assert!(break_even_chunks(1.0).is_err() && break_even_chunks(0.5).is_err());
        assert_relative_eq!(relative_gain(1.0, 2.0), 1.0 / 1.5);
        assert_relative_eq!(relative_gain(10.0, 2.0), 10.0 / 6.0, epsilon = 1e-12);
        assert!(relative_gain(20.0, 2.0) > relative_gain(10.0, 2.0));
    }

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_fences("```xml\n<patient/>\n```"), "<patient/>");
        assert_eq!(strip_fences("  <patient/> "), "<patient/>");
    }

    #[test]
    fn canonicalize_rejects_invented_content() {
        let src = XmlDocument::parse(
            "<patient>\n  <visit date=\"2019-01-01\">\n    <condition code=\"A\" display=\"x\"/>\n  </visit>\n</patient>\n",
        )
        .unwrap();
        let ok = canonicalize(
            "<patient><visit date=\"2019-01-01\"><condition display=\"x\" code=\"A\"/></visit></patient>",
            &src,
        )
        .unwrap();
        assert_eq!(ok.1[0].events, ["<condition code=\"A\" display=\"x\"/>"]);
        assert!(canonicalize("<patient><visit date=\"2019-02-01\"><condition code=\"A\" display=\"x\"/></visit></patient>", &src).is_err());
        assert!(canonicalize("<patient><visit date=\"2019-01-01\"><condition code=\"B\"/></visit></patient>", &src).is_err());
        assert!(canonicalize("<patient>", &src).is_err());
        assert!(canonicalize("<patient></patient>", &src).unwrap().1.is_empty());
    }
}
