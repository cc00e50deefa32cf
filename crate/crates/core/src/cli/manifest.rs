use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::util::sha256_hex;

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Merged settings; usable as `--config` to repeat the run.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_digests: BTreeMap<String, String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// Output path → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn start(command: &str, config: Value) -> Self {
        let now = Utc::now();
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds: BTreeMap::new(),
            backend: None,
            prompt_digests: BTreeMap::new(),
            started_at: now,
            finished_at: now,
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Digest an output file, or every file below an output directory.
    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
            entries.sort();
            for p in entries {
                self.output(&p)?;
            }
        } else {
            let bytes = std::fs::read(path)?;
            self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn note(&mut self, key: &str, v: impl Serialize) {
        self.notes
            .insert(key.into(), serde_json::to_value(v).expect("notes are plain data"));
    }

    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        self.finished_at = Utc::now();
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// `<out>.manifest.json` for a file output, `<out>/run_manifest.json` for
/// a directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("run_manifest.json");
    }
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
