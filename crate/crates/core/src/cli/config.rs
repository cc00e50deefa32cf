//! Layered settings: flags, then `TRAJCHAIN_*` variables (both resolved by
//! clap), then the `--config` file, then built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::UsageError;

pub const COMMANDS: [&str; 8] = ["synth", "cohort", "chunk", "predict", "judge", "eval", "topics", "transitions"];

/// Parse a TOML, YAML or JSON settings file into a JSON value. A run
/// manifest is accepted too, so a run can be repeated from its record.
pub fn load_file(path: &Path) -> Result<Value, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
    let bad = |e: String| UsageError(format!("--config {}: {e}", path.display()));
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let v: Value = match ext.as_str() {
        "toml" => toml::from_str(&text).map_err(|e| bad(e.to_string()))?,
        "json" => serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?,
        _ => serde_yaml::from_str(&text).map_err(|e| bad(e.to_string()))?,
    };
    if !v.is_object() && !v.is_null() {
        return Err(bad("expected a mapping at the top level".into()));
    }
    if let (Some(Value::String(cmd)), Some(cfg)) = (v.get("command"), v.get("config")) {
        let mut m = Map::new();
        m.insert(cmd.clone(), cfg.clone());
        return Ok(Value::Object(m));
    }
    Ok(v)
}

/// Settings for one command: shared top-level keys overlaid by the
/// command's own table.
pub fn section(file: &Value, command: &str) -> Map<String, Value> {
    let mut out = Map::new();
    let Some(obj) = file.as_object() else { return out };
    for (k, v) in obj {
        if !COMMANDS.contains(&k.as_str()) {
            out.insert(k.clone(), v.clone());
        }
    }
    if let Some(Value::Object(own)) = obj.get(command) {
        for (k, v) in own {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Overlay the values set on the command line (or via environment) onto
/// the file section and decode the result. Unset flags are `None` or
/// `false` and leave the file value alone. Returns the merged settings
/// and their JSON snapshot.
pub fn layer<T: Serialize + DeserializeOwned>(cli: &T, file: Map<String, Value>) -> Result<(T, Value), UsageError> {
    let mut merged = file;
    let given = serde_json::to_value(cli).map_err(|e| UsageError(e.to_string()))?;
    for (k, v) in given.as_object().into_iter().flatten() {
        if !(v.is_null() || *v == Value::Bool(false)) {
            merged.insert(k.clone(), v.clone());
        }
    }
    let merged = Value::Object(merged);
    let t = serde_json::from_value(merged.clone()).map_err(|e| UsageError(format!("invalid settings: {e}")))?;
    Ok((t, merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct A {
        seed: Option<u64>,
        k: Option<usize>,
        cancer: Option<String>,
        resume: bool,
    }

    #[test]
    fn flags_beat_file() {
        let file: Value = serde_json::json!({"seed": 1, "k": 3, "resume": true, "predict": {"k": 5, "cancer": "x"}});
        let cli = A {
            seed: Some(9),
            ..A::default()
        };
        let (a, snap) = layer(&cli, section(&file, "predict")).unwrap();
        assert_eq!(
            a,
            A {
                seed: Some(9),
                k: Some(5),
                cancer: Some("x".into()),
                resume: true
            }
        );
        assert_eq!(snap["seed"], 9);
    }

    #[test]
    fn manifest_unwraps_to_its_command() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"command":"eval","config":{"boot":10}}"#).unwrap();
        let v = load_file(&p).unwrap();
        assert_eq!(section(&v, "eval")["boot"], 10);
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 4\n[eval]\nboot = 2\n").unwrap();
        let s = section(&load_file(&t).unwrap(), "eval");
        assert_eq!((s["seed"].as_u64(), s["boot"].as_u64()), (Some(4), Some(2)));
    }
}
