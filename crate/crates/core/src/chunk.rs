//! Time-aware chunking.
//!
//! Whole visit groups are packed greedily, oldest first, into chunks whose
//! full text (including the `<patient>` envelope) stays within `limit`
//! tokens. A group that cannot fit in a chunk by itself is split at event
//! boundaries and every piece keeps the original visit date. Chunk 1 carries
//! the demographics header.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenCounter;
use crate::xml::{push_visit, visit_event_lines, XmlDocument, ROOT_CLOSE, ROOT_OPEN};

/// Smallest accepted chunk limit.
pub const MIN_LIMIT: usize = 64;
/// Default chunk limit (16k tokens).
pub const DEFAULT_LIMIT: usize = 16_384;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// 1-based position in the chain.
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
    /// First and last visit date; `None` only for a header-only chunk.
    pub span: Option<(NaiveDate, NaiveDate)>,
    pub carries_header: bool,
    /// Piece of a visit group too large for one chunk.
    pub split_group: bool,
    /// Over the limit because a single event cannot be split further.
    pub oversize: bool,
    pub event_count: usize,
}

impl Chunk {
    pub fn visit_dates(&self) -> Vec<NaiveDate> {
        visit_dates_in(&self.text)
    }

    pub fn event_lines(&self) -> impl Iterator<Item = &str> {
        visit_event_lines(&self.text)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk limit {0} is below the minimum of {MIN_LIMIT} tokens")]
    LimitTooSmall(usize),
}

struct Builder<'a> {
    counter: &'a dyn TokenCounter,
    limit: usize,
    header: &'a str,
    chunks: Vec<Chunk>,
    text: String,
    first: Option<NaiveDate>,
    last: Option<NaiveDate>,
    events: usize,
}

impl<'a> Builder<'a> {
    fn wants_header(&self) -> bool {
        self.chunks.is_empty()
    }

    fn open_text(&self) -> String {
        let mut s = String::from(ROOT_OPEN);
        if self.wants_header() {
            s.push_str(self.header);
        }
        s
    }

    fn fits(&self, body: &str, extra: &str) -> bool {
        let mut candidate = String::with_capacity(body.len() + extra.len() + ROOT_CLOSE.len() + 64);
        candidate.push_str(body);
        candidate.push_str(extra);
        candidate.push_str(ROOT_CLOSE);
        self.counter.count(&candidate) <= self.limit
    }

    fn is_open(&self) -> bool {
        self.first.is_some()
    }

    fn push_group(&mut self, date: NaiveDate, segment: &str, n_events: usize) {
        if self.text.is_empty() {
            self.text = self.open_text();
        }
        self.text.push_str(segment);
        self.first.get_or_insert(date);
        self.last = Some(date);
        self.events += n_events;
    }

    fn close(&mut self, split_group: bool) {
        if self.text.is_empty() {
            self.text = self.open_text();
        }
        let mut text = std::mem::take(&mut self.text);
        text.push_str(ROOT_CLOSE);
        let token_count = self.counter.count(&text);
        let span = self.first.zip(self.last);
        self.chunks.push(Chunk {
            ordinal: self.chunks.len() + 1,
            carries_header: self.chunks.is_empty(),
            oversize: token_count > self.limit,
            split_group,
            token_count,
            text,
            span,
            event_count: self.events,
        });
        self.first = None;
        self.last = None;
        self.events = 0;
    }

    fn split(&mut self, date: NaiveDate, segment: &str) {
        let mut pending: Vec<&str> = Vec::new();
        for line in visit_event_lines(segment) {
            let body = self.open_text();
            let mut trial = String::new();
            push_visit(&mut trial, date, pending.iter().copied().chain(std::iter::once(line)));
            if pending.is_empty() || self.fits(&body, &trial) {
                pending.push(line);
                continue;
            }
            self.emit_piece(date, &pending);
            pending.clear();
            pending.push(line);
        }
        if !pending.is_empty() {
            self.emit_piece(date, &pending);
        }
    }

    fn emit_piece(&mut self, date: NaiveDate, events: &[&str]) {
        let mut seg = String::new();
        push_visit(&mut seg, date, events.iter().copied());
        self.push_group(date, &seg, events.len());
        self.close(true);
    }
}

/// Partition `doc` into chunks of at most `limit` tokens.
pub fn chunk(doc: &XmlDocument, limit: usize, counter: &dyn TokenCounter) -> Result<Vec<Chunk>, ChunkError> {
    if limit < MIN_LIMIT {
        return Err(ChunkError::LimitTooSmall(limit));
    }
    let mut b = Builder {
        counter,
        limit,
        header: doc.header(),
        chunks: Vec::new(),
        text: String::new(),
        first: None,
        last: None,
        events: 0,
    };
    for (i, seg) in doc.segment_index.iter().enumerate() {
        let segment = doc.segment_text(i);
        let n_events = visit_event_lines(segment).count();
        if b.is_open() {
            if b.fits(&b.text, segment) {
                b.push_group(seg.date, segment, n_events);
                continue;
            }
            b.close(false);
        }
        if b.fits(&b.open_text(), segment) {
            b.push_group(seg.date, segment, n_events);
        } else {
            b.split(seg.date, segment);
        }
    }
    if b.is_open() || b.chunks.is_empty() {
        b.close(false);
    }
    Ok(b.chunks)
}

/// Dates of all `<visit>` elements in a chunk or document text, in order.
pub fn visit_dates_in(text: &str) -> Vec<NaiveDate> {
    text.lines()
        .filter_map(|l| l.trim_start().strip_prefix("<visit date=\""))
        .filter_map(|r| r.get(..10))
        .filter_map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
        .collect()
}

/// Per-chunk manifest row, as written by the `chunk` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkManifestEntry {
    pub ordinal: usize,
    pub file: String,
    pub token_count: usize,
    pub span_start: Option<NaiveDate>,
    pub span_end: Option<NaiveDate>,
    pub carries_header: bool,
    pub split_group: bool,
    pub oversize: bool,
    pub event_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::WordApprox;
    use crate::xml::VisitGroup;

    fn date(day: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Days::new(day)
    }

    /// An event line of `words + 1` whitespace-separated words.
    fn event(words: usize, tag: &str) -> String {
        let mut s = format!("<observation display=\"{tag}");
        for _ in 1..words {
            s.push_str(" w");
        }
        s.push_str("\"/>");
        s
    }

    /// A document whose groups each hold `n` events of `w` words.
    fn doc(groups: &[(usize, usize)]) -> XmlDocument {
        let gs: Vec<VisitGroup> = groups
            .iter()
            .enumerate()
            .map(|(i, &(n, w))| VisitGroup {
                date: date(i as u64 * 10),
                events: (0..n).map(|k| event(w, &format!("g{i}e{k}"))).collect(),
            })
            .collect();
        XmlDocument::assemble("  <demographics age=\"60\" sex=\"male\"/>\n", &gs)
    }

    #[test]
    fn rejects_tiny_limit() {
        assert_eq!(
            chunk(&doc(&[(1, 1)]), 10, &WordApprox).unwrap_err(),
            ChunkError::LimitTooSmall(10)
        );
    }

    #[test]
    fn small_document_is_one_chunk() {
        let d = doc(&[(2, 3), (1, 3)]);
        let cs = chunk(&d, DEFAULT_LIMIT, &WordApprox).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].text, d.text);
        assert!(cs[0].carries_header);
        assert_eq!(cs[0].span, Some((date(0), date(10))));
    }

    #[test]
    fn greedy_packing_of_6k_7k_5k_groups() {
        // Groups of 100 events each; event words chosen so group token sizes
        // are roughly 6k, 7k and 5k under the word approximation.
        let d = doc(&[(100, 45), (100, 53), (100, 37)]);
        let g: Vec<usize> = (0..3).map(|i| WordApprox.count(d.segment_text(i))).collect();
        assert!((5900..6100).contains(&g[0]) && (6900..7100).contains(&g[1]) && (4900..5100).contains(&g[2]), "{g:?}");
        let cs = chunk(&d, 16_384, &WordApprox).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].span, Some((date(0), date(10))));
        assert_eq!(cs[1].span, Some((date(20), date(20))));
        assert!(!cs[1].carries_header);
        assert!(cs.iter().all(|c| c.token_count <= 16_384 && !c.split_group));
    }

    #[test]
    fn oversized_group_splits_into_three_restamped_pieces() {
        // one group of ~40k tokens: 400 events of 76 words (~100 tokens each)
        let d = doc(&[(400, 76)]);
        assert!((39_000..41_000).contains(&WordApprox.count(&d.text)));
        let cs = chunk(&d, 16_384, &WordApprox).unwrap();
        assert_eq!(cs.len(), 3);
        for c in &cs {
            assert_eq!(c.span, Some((date(0), date(0))));
            assert!(c.split_group);
            assert!(!c.oversize);
            assert!(c.token_count <= 16_384);
            assert_eq!(c.visit_dates(), vec![date(0)]);
            crate::xml::check_well_formed(&c.text).unwrap();
        }
        assert_eq!(cs.iter().map(|c| c.event_count).sum::<usize>(), 400);
        assert!(cs[0].carries_header && !cs[1].carries_header);
    }

    #[test]
    fn single_unsplittable_event_is_flagged() {
        let d = doc(&[(1, 200)]);
        let cs = chunk(&d, 64, &WordApprox).unwrap();
        assert_eq!(cs.len(), 1);
        assert!(cs[0].oversize);
    }

    #[test]
    fn header_only_document() {
        let d = doc(&[]);
        let cs = chunk(&d, 64, &WordApprox).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].span, None);
        assert_eq!(cs[0].event_count, 0);
    }
}
