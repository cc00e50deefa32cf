use serde_json::Value;
use thiserror::Error;

/// No JSON value could be recovered from a model reply.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("no parseable JSON in model output ({reason})")]
pub struct JsonExtractError {
    pub reason: String,
    pub raw: String,
}

/// Parse a model reply as JSON: direct parse, then inside markdown code
/// fences, then the first balanced `{...}` or `[...]` region.
pub fn extract_json(text: &str) -> Result<Value, JsonExtractError> {
    let trimmed = text.trim();
    let direct_err = match serde_json::from_str::<Value>(trimmed) {
        Ok(v) => return Ok(v),
        Err(e) => e.to_string(),
    };
    if let Some(inner) = fenced(trimmed) {
        if let Ok(v) = serde_json::from_str::<Value>(inner.trim()) {
            return Ok(v);
        }
    }
    let bytes = trimmed.as_bytes();
    let mut from = 0;
    while let Some(off) = trimmed[from..].find(['{', '[']) {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v) = serde_json::from_str::<Value>(&trimmed[start..=end]) {
                return Ok(v);
            }
        }
        from = start + 1;
    }
    Err(JsonExtractError {
        reason: direct_err,
        raw: text.to_string(),
    })
}

fn fenced(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // skip an info string such as `json`
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(&body[..close])
}

/// Index of the bracket closing the one at `start`, string-aware.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn direct() {
        assert_eq!(extract_json("{\"a\":1}").unwrap(), json!({"a": 1}));
    }

    #[test]
    fn fenced_block() {
        assert_eq!(extract_json("```json\n{\"a\":1}\n```").unwrap(), json!({"a": 1}));
        assert_eq!(extract_json("Sure!\n```\n[1,2]\n```\nthanks").unwrap(), json!([1, 2]));
    }

    #[test]
    fn embedded_object() {
        let v = extract_json("Here you go: {\"a\": {\"b\": \"}{\"}} -- done").unwrap();
        assert_eq!(v, json!({"a": {"b": "}{"}}));
        let v = extract_json("noise {not json} then {\"ok\": true}").unwrap();
        assert_eq!(v, json!({"ok": true}));
    }

    #[test]
    fn no_object_keeps_raw_text() {
        let e = extract_json("risk is high").unwrap_err();
        assert_eq!(e.raw, "risk is high");
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i32>().prop_map(|n| json!(n)),
            "[a-zA-Z0-9 {}\\[\\]\"\\\\]{0,12}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,5}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn valid_json_round_trips(v in arb_json()) {
            let s = serde_json::to_string(&v).unwrap();
            prop_assert_eq!(extract_json(&s).unwrap(), v.clone());
            let fenced = format!("```json\n{}\n```", serde_json::to_string_pretty(&v).unwrap());
            prop_assert_eq!(extract_json(&fenced).unwrap(), v);
        }
    }
}
