//! Built-in response policies for the scripted backend.
//!
//! A policy recognizes which agent role a request belongs to from the tagged
//! sections of the user prompt and computes a well-formed reply from the
//! request content alone, so one script entry can drive a whole cohort.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{prompt_digest, ChatRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Workers summarize by prompt digest and log one event per visit; the
    /// manager answers 5; the preprocessor returns its chunk unchanged.
    Echo,
    /// Workers flag marker phrases in the chunk; the manager scores
    /// `2 + min(8, 4 * marker events in memory)`; the preprocessor keeps
    /// only visits containing a marker.
    Marker { markers: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    InitialWorker,
    SubsequentWorker,
    Manager,
    Preprocessor,
}

/// Infer the agent role from the section tags of the user prompt.
pub fn role_of(req: &ChatRequest) -> Option<Role> {
    let u = &req.user_prompt;
    if u.contains("<universal_memory_events>") {
        Some(Role::Manager)
    } else if u.contains("<new_chunk_xml>") {
        Some(Role::SubsequentWorker)
    } else if u.contains("<source_chunk_xml>") {
        Some(Role::Preprocessor)
    } else if u.contains("<chunk_xml>") {
        Some(Role::InitialWorker)
    } else {
        None
    }
}

/// Body of the `<tag>` section of a prompt, without the surrounding newlines.
pub fn section<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text.rfind(&close)?;
    (end >= start).then(|| &text[start..end])
}

/// `(date, block)` for each `<visit>` element of a chunk, in order.
fn visits(xml: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut current: Option<(String, String)> = None;
    for line in xml.lines() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix("<visit date=\"") {
            let date = rest.split('"').next().unwrap_or_default().to_string();
            current = Some((date, format!("{line}\n")));
        } else if let Some((_, block)) = current.as_mut() {
            block.push_str(line);
            block.push('\n');
            if t == "</visit>" {
                out.extend(current.take());
            }
        }
    }
    out
}

fn demographics_line(xml: &str) -> Option<&str> {
    xml.lines().find(|l| l.trim_start().starts_with("<demographics"))
}

fn find_markers<'m>(text: &str, markers: &'m [String]) -> Vec<&'m str> {
    let lower = text.to_lowercase();
    markers
        .iter()
        .filter(|m| !m.is_empty() && lower.contains(&m.to_lowercase()))
        .map(String::as_str)
        .collect()
}

fn worker_reply(role: Role, summary: String, events: Vec<Value>, risk: &str, reasoning: String) -> String {
    let v = if role == Role::InitialWorker {
        json!({
            "summary": summary,
            "risk_factors_or_clinical_events": events,
            "risk_assessment": {"risk_level": risk, "reasoning": reasoning},
        })
    } else {
        json!({
            "updated_summary": summary,
            "new_risk_factors_or_clinical_events": events,
            "temporal_analysis": "No change in pattern beyond the listed events.",
            "updated_risk_assessment": {"risk_level": risk, "reasoning": reasoning},
        })
    };
    serde_json::to_string_pretty(&v).expect("json")
}

fn memory_entries(req: &ChatRequest) -> Vec<(String, String)> {
    let raw = section(&req.user_prompt, "universal_memory_events").unwrap_or("[]");
    let v: Value = serde_json::from_str(raw).unwrap_or(Value::Array(Vec::new()));
    v.as_array()
        .into_iter()
        .flatten()
        .map(|e| {
            let field = |k: &str| e.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
            (field("timestamp"), field("event"))
        })
        .collect()
}

fn manager_reply(risk: i64, events: &[(String, String)], narrative: String, reasoning: String) -> String {
    let finals: Vec<String> = events.iter().map(|(t, e)| format!("{t}: {e}")).collect();
    serde_json::to_string_pretty(&json!({
        "risk_evolution_summary": narrative,
        "final_cancer_related_events": finals,
        "final_risk_assessment": {"risk_level": risk, "reasoning": reasoning},
    }))
    .expect("json")
}

/// Compute the reply to `req`, or `None` when the request is not one of the
/// pipeline's agent prompts.
pub fn respond(policy: &Policy, req: &ChatRequest) -> Option<String> {
    let role = role_of(req)?;
    match policy {
        Policy::Echo => Some(echo(role, req)),
        Policy::Marker { markers } => Some(marker(role, req, markers)),
    }
}

fn chunk_section(role: Role, req: &ChatRequest) -> &str {
    let tag = match role {
        Role::InitialWorker => "chunk_xml",
        Role::SubsequentWorker => "new_chunk_xml",
        Role::Preprocessor => "source_chunk_xml",
        Role::Manager => "universal_memory_events",
    };
    section(&req.user_prompt, tag).unwrap_or_default()
}

fn echo(role: Role, req: &ChatRequest) -> String {
    let chunk = chunk_section(role, req);
    match role {
        Role::Preprocessor => chunk.to_string(),
        Role::Manager => {
            let events = memory_entries(req);
            manager_reply(5, &events, format!("echo manager over {} events", events.len()), "echo".into())
        }
        Role::InitialWorker | Role::SubsequentWorker => {
            let vs = visits(chunk);
            let digest = prompt_digest(&req.system_prompt, &req.user_prompt);
            let span = match (vs.first(), vs.last()) {
                (Some(a), Some(b)) => format!("{} to {}", a.0, b.0),
                _ => "no visits".into(),
            };
            let events = vs
                .iter()
                .map(|(d, block)| {
                    let n = block.lines().count().saturating_sub(2);
                    json!({"timestamp": d, "event": format!("visit on {d} with {n} events")})
                })
                .collect();
            worker_reply(
                role,
                format!("echo {digest} covering {} visits from {span}", vs.len()),
                events,
                "Moderate",
                "echo".into(),
            )
        }
    }
}

fn marker(role: Role, req: &ChatRequest, markers: &[String]) -> String {
    let chunk = chunk_section(role, req);
    match role {
        Role::Preprocessor => {
            let mut out = String::from("<patient>\n");
            if let Some(d) = demographics_line(chunk) {
                out.push_str(d);
                out.push('\n');
            }
            for (_, block) in visits(chunk) {
                if !find_markers(&block, markers).is_empty() {
                    out.push_str(&block);
                }
            }
            out.push_str("</patient>");
            out
        }
        Role::Manager => {
            let events = memory_entries(req);
            let seen = events
                .iter()
                .filter(|(_, e)| !find_markers(e, markers).is_empty())
                .count() as i64;
            let risk = 2 + (4 * seen).min(8);
            manager_reply(
                risk,
                &events,
                format!("{seen} marker events recorded across the history"),
                format!("risk = 2 + min(8, 4 x {seen})"),
            )
        }
        Role::InitialWorker | Role::SubsequentWorker => {
            let vs = visits(chunk);
            let mut events = Vec::new();
            for (date, block) in &vs {
                for m in find_markers(block, markers) {
                    events.push(json!({"timestamp": date, "event": format!("{m} documented")}));
                }
            }
            let (risk, found) = if events.is_empty() {
                ("Low", "no marker findings".to_string())
            } else {
                ("High", format!("{} marker findings", events.len()))
            };
            worker_reply(
                role,
                format!("Reviewed {} visits; {found}.", vs.len()),
                events,
                risk,
                found,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHUNK: &str = "<patient>\n  <demographics age=\"60\" sex=\"male\"/>\n  <visit date=\"2018-01-02\">\n    <observation display=\"Active smoking\"/>\n  </visit>\n  <visit date=\"2018-03-04\">\n    <condition display=\"Cough\"/>\n  </visit>\n</patient>";

    fn worker_req(tag: &str) -> ChatRequest {
        ChatRequest::new("m", "sys", format!("Here:\n<{tag}>\n{CHUNK}\n</{tag}>\n\nGo."))
    }

    fn markers() -> Policy {
        Policy::Marker {
            markers: vec!["active smoking".into(), "pulmonary nodules".into()],
        }
    }

    #[test]
    fn roles_from_tags() {
        assert_eq!(role_of(&worker_req("chunk_xml")), Some(Role::InitialWorker));
        assert_eq!(role_of(&worker_req("new_chunk_xml")), Some(Role::SubsequentWorker));
        assert_eq!(role_of(&worker_req("source_chunk_xml")), Some(Role::Preprocessor));
        assert_eq!(role_of(&ChatRequest::new("m", "s", "hello")), None);
    }

    #[test]
    fn marker_worker_flags_high() {
        let out: Value = serde_json::from_str(&respond(&markers(), &worker_req("chunk_xml")).unwrap()).unwrap();
        assert_eq!(out["risk_assessment"]["risk_level"], "High");
        let evs = out["risk_factors_or_clinical_events"].as_array().unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0]["timestamp"], "2018-01-02");
    }

    #[test]
    fn marker_manager_formula() {
        let mem = |n: usize| {
            let entries: Vec<Value> = (0..n)
                .map(|i| json!({"timestamp": format!("2018-01-0{}", i + 1), "event": "active smoking documented"}))
                .collect();
            ChatRequest::new(
                "m",
                "sys",
                format!("<universal_memory_events>\n{}\n</universal_memory_events>", serde_json::to_string(&entries).unwrap()),
            )
        };
        for (n, want) in [(0, 2), (1, 6), (2, 10), (5, 10)] {
            let out: Value = serde_json::from_str(&respond(&markers(), &mem(n)).unwrap()).unwrap();
            assert_eq!(out["final_risk_assessment"]["risk_level"], want, "n={n}");
            assert_eq!(out["final_cancer_related_events"].as_array().unwrap().len(), n);
        }
    }

    #[test]
    fn marker_preprocessor_keeps_marker_visits() {
        let out = respond(&markers(), &worker_req("source_chunk_xml")).unwrap();
        assert!(out.contains("2018-01-02") && !out.contains("2018-03-04"));
        assert!(out.contains("<demographics"));
        roxmltree::Document::parse(&out).unwrap();
    }

    #[test]
    fn echo_preprocessor_is_identity() {
        assert_eq!(respond(&Policy::Echo, &worker_req("source_chunk_xml")).unwrap(), CHUNK);
    }
}
