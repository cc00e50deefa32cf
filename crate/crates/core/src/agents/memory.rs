use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub timestamp: String,
    pub event: String,
    /// Ordinal of the chunk whose worker reported the event.
    pub source_chunk: usize,
}

/// Lowercase, collapse whitespace runs, strip punctuation at both ends.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Long-term memory shared along one worker chain: append-only, with
/// exact-match deduplication on the normalized `(timestamp, event)` key.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    entries: Vec<MemoryEntry>,
    index: HashSet<(String, String)>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append unless an entry with the same normalized key exists.
    pub fn append(&mut self, entry: MemoryEntry) -> bool {
        let key = (normalize(&entry.timestamp), normalize(&entry.event));
        if !self.index.insert(key) {
            return false;
        }
        self.entries.push(entry);
        true
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The most recent `k` entries in insertion order.
    pub fn last_k(&self, k: usize) -> &[MemoryEntry] {
        &self.entries[self.entries.len().saturating_sub(k)..]
    }

    pub fn into_entries(self) -> Vec<MemoryEntry> {
        self.entries
    }
}

/// Prompt rendering of memory entries: a JSON list of `{timestamp, event}`.
pub fn render_entries(entries: &[MemoryEntry]) -> String {
    let v: Vec<_> = entries
        .iter()
        .map(|e| json!({"timestamp": e.timestamp, "event": e.event}))
        .collect();
    serde_json::to_string_pretty(&v).expect("json")
}
