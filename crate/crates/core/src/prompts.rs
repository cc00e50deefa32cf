//! Prompt templates with `{placeholder}` substitution.
//!
//! Templates ship inside the crate and can be overridden file by file from a
//! directory. A placeholder is `{` + `[a-z_]+` + `}`; any other brace is
//! literal text, so JSON examples inside a template need no escaping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::util::sha256_hex;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{0} unbound")]
    Unbound(String),
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    InitialWorker,
    SubsequentWorker,
    Manager,
    AnyCancerInitialWorker,
    AnyCancerSubsequentWorker,
    AnyCancerManager,
    Preprocessor,
    Judge,
    ThemeGeneration,
    ThemeAssignment,
}

impl TemplateName {
    pub const ALL: [TemplateName; 10] = [
        Self::InitialWorker,
        Self::SubsequentWorker,
        Self::Manager,
        Self::AnyCancerInitialWorker,
        Self::AnyCancerSubsequentWorker,
        Self::AnyCancerManager,
        Self::Preprocessor,
        Self::Judge,
        Self::ThemeGeneration,
        Self::ThemeAssignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::InitialWorker => "initial_worker",
            Self::SubsequentWorker => "subsequent_worker",
            Self::Manager => "manager",
            Self::AnyCancerInitialWorker => "any_cancer_initial_worker",
            Self::AnyCancerSubsequentWorker => "any_cancer_subsequent_worker",
            Self::AnyCancerManager => "any_cancer_manager",
            Self::Preprocessor => "preprocessor",
            Self::Judge => "judge",
            Self::ThemeGeneration => "theme_generation",
            Self::ThemeAssignment => "theme_assignment",
        }
    }

    /// File names of the system and user parts. Any-cancer variants share
    /// the user part of their base template.
    pub fn files(self) -> (String, String) {
        let user_of = match self {
            Self::AnyCancerInitialWorker => Self::InitialWorker,
            Self::AnyCancerSubsequentWorker => Self::SubsequentWorker,
            Self::AnyCancerManager => Self::Manager,
            other => other,
        };
        (
            format!("{}.system.txt", self.as_str()),
            format!("{}.user.txt", user_of.as_str()),
        )
    }

    /// Placeholders the template may reference.
    pub fn vocabulary(self) -> &'static [&'static str] {
        match self {
            Self::InitialWorker => &["cancer_type", "chunk_xml"],
            Self::SubsequentWorker => &["cancer_type", "chunk_xml", "previous_summary", "memory_events"],
            Self::Manager => &["cancer_type", "time_of_prediction", "final_worker_outputs", "universal_memory_events"],
            Self::AnyCancerInitialWorker => &["cancer_type", "candidate_cancers", "chunk_xml"],
            Self::AnyCancerSubsequentWorker => &[
                "cancer_type",
                "candidate_cancers",
                "chunk_xml",
                "previous_summary",
                "memory_events",
            ],
            Self::AnyCancerManager => &[
                "cancer_type",
                "candidate_cancers",
                "time_of_prediction",
                "final_worker_outputs",
                "universal_memory_events",
            ],
            Self::Preprocessor => &["cancer_type", "chunk_xml"],
            Self::Judge => &["cancer_type", "years", "diagnosis", "model_a_output", "model_b_output"],
            Self::ThemeGeneration => &["cancer_type", "num_themes", "documents"],
            Self::ThemeAssignment => &["cancer_type", "num_themes", "themes_list", "patients_json"],
        }
    }
}

fn builtin_text(file: &str) -> Option<&'static str> {
    Some(match file {
        "initial_worker.system.txt" => include_str!("../prompts/initial_worker.system.txt"),
        "initial_worker.user.txt" => include_str!("../prompts/initial_worker.user.txt"),
        "subsequent_worker.system.txt" => include_str!("../prompts/subsequent_worker.system.txt"),
        "subsequent_worker.user.txt" => include_str!("../prompts/subsequent_worker.user.txt"),
        "manager.system.txt" => include_str!("../prompts/manager.system.txt"),
        "manager.user.txt" => include_str!("../prompts/manager.user.txt"),
        "any_cancer_initial_worker.system.txt" => include_str!("../prompts/any_cancer_initial_worker.system.txt"),
        "any_cancer_subsequent_worker.system.txt" => include_str!("../prompts/any_cancer_subsequent_worker.system.txt"),
        "any_cancer_manager.system.txt" => include_str!("../prompts/any_cancer_manager.system.txt"),
        "preprocessor.system.txt" => include_str!("../prompts/preprocessor.system.txt"),
        "preprocessor.user.txt" => include_str!("../prompts/preprocessor.user.txt"),
        "judge.system.txt" => include_str!("../prompts/judge.system.txt"),
        "judge.user.txt" => include_str!("../prompts/judge.user.txt"),
        "theme_generation.system.txt" => include_str!("../prompts/theme_generation.system.txt"),
        "theme_generation.user.txt" => include_str!("../prompts/theme_generation.user.txt"),
        "theme_assignment.system.txt" => include_str!("../prompts/theme_assignment.system.txt"),
        "theme_assignment.user.txt" => include_str!("../prompts/theme_assignment.user.txt"),
        _ => return None,
    })
}

/// Placeholder names in order of appearance, with their byte ranges.
fn scan(text: &str) -> Vec<(std::ops::Range<usize>, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i..j + 1, &text[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Values for placeholders; unused entries are ignored.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, name: &str, value: impl Into<String>) {
        self.0.insert(name.to_string(), value.into());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub system_text: String,
    pub user_text: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, system_text: String, user_text: String) -> Result<Self, PromptError> {
        let t = Self { name, system_text, user_text };
        for p in t.placeholders() {
            if !name.vocabulary().contains(&p.as_str()) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.as_str().into(),
                    name: p,
                });
            }
        }
        Ok(t)
    }

    /// Placeholders referenced by either part, sorted and deduplicated.
    pub fn placeholders(&self) -> Vec<String> {
        let mut v: Vec<String> = scan(&self.system_text)
            .into_iter()
            .chain(scan(&self.user_text))
            .map(|(_, n)| n.to_string())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Substitute every placeholder in one pass, so bound values are never
    /// themselves scanned for placeholders.
    pub fn render(&self, bindings: &Bindings) -> Result<(String, String), PromptError> {
        Ok((fill(&self.system_text, bindings)?, fill(&self.user_text, bindings)?))
    }

    pub fn digest(&self) -> String {
        sha256_hex(format!("{}\0{}", self.system_text, self.user_text).as_bytes())
    }
}

fn fill(text: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, name) in scan(text) {
        let value = bindings.0.get(name).ok_or_else(|| PromptError::Unbound(name.to_string()))?;
        out.push_str(&text[last..range.start]);
        out.push_str(value);
        last = range.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

fn strip_final_newline(s: &str) -> String {
    s.strip_suffix('\n').unwrap_or(s).to_string()
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        Self::load(|file| Ok(builtin_text(file).map(str::to_string))).expect("built-in templates are valid")
    }

    /// Built-in templates with files of the same name in `dir` taking
    /// precedence.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::load(|file| {
            let p = dir.join(file);
            if p.exists() {
                std::fs::read_to_string(&p).map(Some).map_err(|e| PromptError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })
            } else {
                Ok(builtin_text(file).map(str::to_string))
            }
        })
    }

    fn load(read: impl Fn(&str) -> Result<Option<String>, PromptError>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for name in TemplateName::ALL {
            let (sys, user) = name.files();
            let get = |f: &str| -> Result<String, PromptError> {
                read(f)?.map(|s| strip_final_newline(&s)).ok_or_else(|| PromptError::Io {
                    path: f.into(),
                    message: "missing".into(),
                })
            };
            templates.insert(name, PromptTemplate::new(name, get(&sys)?, get(&user)?)?);
        }
        Ok(Self { templates })
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    /// `(template name, sha256)` for run manifests.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, t)| (k.as_str().to_string(), t.digest()))
            .collect()
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_loads_all() {
        let lib = PromptLibrary::builtin();
        for n in TemplateName::ALL {
            assert!(!lib.get(n).system_text.ends_with('\n'), "{n:?}");
        }
        assert_eq!(
            lib.get(TemplateName::SubsequentWorker).placeholders(),
            ["cancer_type", "chunk_xml", "memory_events", "previous_summary"]
        );
    }

    #[test]
    fn initial_worker_render() {
        let lib = PromptLibrary::builtin();
        let (s, u) = lib
            .get(TemplateName::InitialWorker)
            .render(&Bindings::new().set("cancer_type", "lung cancer").set("chunk_xml", "<patient/>"))
            .unwrap();
        assert!(s.contains("lung cancer risk assessment"));
        assert!(u.contains("<chunk_xml>\n<patient/>\n</chunk_xml>"));
        assert!(scan(&s).is_empty() && scan(&u).is_empty());
    }

    #[test]
    fn missing_binding_is_named() {
        let lib = PromptLibrary::builtin();
        let b = Bindings::new()
            .set("cancer_type", "x")
            .set("chunk_xml", "c")
            .set("previous_summary", "p");
        let err = lib.get(TemplateName::SubsequentWorker).render(&b).unwrap_err();
        assert_eq!(err.to_string(), "memory_events unbound");
    }

    #[test]
    fn no_placeholders_means_identity() {
        let t = PromptTemplate::new(TemplateName::InitialWorker, "plain {\n \"a\": 1}".into(), "u".into()).unwrap();
        let (s, u) = t.render(&Bindings::new().set("cancer_type", "x").set("other", "y")).unwrap();
        assert_eq!((s.as_str(), u.as_str()), ("plain {\n \"a\": 1}", "u"));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new(TemplateName::InitialWorker, "{cancer_type}".into(), "{chunk_xml}".into()).unwrap();
        let (_, u) = t
            .render(&Bindings::new().set("cancer_type", "x").set("chunk_xml", "{cancer_type}"))
            .unwrap();
        assert_eq!(u, "{cancer_type}");
    }

    #[test]
    fn unknown_placeholder_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manager.user.txt"), "{bogus}\n").unwrap();
        assert!(matches!(
            PromptLibrary::from_dir(dir.path()),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
    }
}
