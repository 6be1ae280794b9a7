//! Prompt templates and heading aliases, loaded from configuration files.
//!
//! Defaults are the files under the repository's `config/` directory,
//! compiled in so the engine works without a checkout. A prompts directory
//! passed at runtime overrides any template it contains.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Template slot names.
pub mod slots {
    pub const TRANSCRIPT: &str = "transcript";
    pub const QUESTION: &str = "question";
    pub const DOCUMENT: &str = "document";
    pub const PATIENT_CONTEXT: &str = "patient_context";
    pub const MEDICAL_KNOWLEDGE: &str = "medical_knowledge";
    pub const CONTEXT: &str = "context";
    pub const COUNT: &str = "count";
    pub const TEXT: &str = "text";
    pub const ANSWER_CLAIMS: &str = "answer_claims";
    pub const REFERENCE_CLAIMS: &str = "reference_claims";
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} is missing placeholder {{{slot}}}")]
    MissingSlot { name: &'static str, slot: &'static str },
    #[error("template {name} must place {{patient_context}}, {{medical_knowledge}} and {{question}} in that order, with the question last")]
    SlotOrder { name: &'static str },
    #[error("heading config: {0}")]
    Headings(String),
}

/// A prompt template with `{slot}` placeholders. Unknown `{...}` sequences
/// are left as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template(String);

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Template(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Byte position of `{slot}` in the template, if present.
    pub fn position(&self, slot: &str) -> Option<usize> {
        self.0.find(&format!("{{{slot}}}"))
    }

    /// Single-pass substitution; slot values are never re-scanned.
    pub fn render(&self, values: &BTreeMap<String, String>) -> String {
        let src = &self.0;
        let mut out = String::with_capacity(src.len() + values.values().map(String::len).sum::<usize>());
        let mut rest = src.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if values.contains_key(&after[..close]) => {
                    out.push_str(&values[&after[..close]]);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

struct TemplateSpec {
    name: &'static str,
    file: &'static str,
    default: &'static str,
    required: &'static [&'static str],
}

const TEMPLATES: &[TemplateSpec] = &[
    TemplateSpec {
        name: "annotation",
        file: "annotation.txt",
        default: include_str!("../../../config/prompts/annotation.txt"),
        required: &[slots::TRANSCRIPT],
    },
    TemplateSpec {
        name: "annotation_retry",
        file: "annotation_retry.txt",
        default: include_str!("../../../config/prompts/annotation_retry.txt"),
        required: &[],
    },
    TemplateSpec {
        name: "compression",
        file: "compression.txt",
        default: include_str!("../../../config/prompts/compression.txt"),
        required: &[slots::QUESTION, slots::DOCUMENT],
    },
    TemplateSpec {
        name: "response",
        file: "response.txt",
        default: include_str!("../../../config/prompts/response.txt"),
        required: &[slots::PATIENT_CONTEXT, slots::MEDICAL_KNOWLEDGE, slots::QUESTION],
    },
    TemplateSpec {
        name: "questions",
        file: "questions.txt",
        default: include_str!("../../../config/prompts/questions.txt"),
        required: &[slots::CONTEXT, slots::COUNT],
    },
    TemplateSpec {
        name: "claims",
        file: "claims.txt",
        default: include_str!("../../../config/prompts/claims.txt"),
        required: &[slots::TEXT],
    },
    TemplateSpec {
        name: "verdicts",
        file: "verdicts.txt",
        default: include_str!("../../../config/prompts/verdicts.txt"),
        required: &[slots::ANSWER_CLAIMS, slots::REFERENCE_CLAIMS],
    },
    TemplateSpec {
        name: "format_retry",
        file: "format_retry.txt",
        default: include_str!("../../../config/prompts/format_retry.txt"),
        required: &[],
    },
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub annotation: Template,
    pub annotation_retry: Template,
    pub compression: Template,
    pub response: Template,
    pub questions: Template,
    pub claims: Template,
    pub verdicts: Template,
    pub format_retry: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_texts(|def| Ok(def.default.to_string())).expect("bundled templates are valid")
    }
}

impl PromptSet {
    /// Templates from `dir`, falling back to the bundled default for any
    /// file that is absent.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        Self::from_texts(|def| {
            let path = dir.join(def.file);
            if path.exists() {
                fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path: path.display().to_string(), source })
            } else {
                Ok(def.default.to_string())
            }
        })
    }

    fn from_texts(
        mut get: impl FnMut(&TemplateSpec) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let mut loaded: BTreeMap<&'static str, Template> = BTreeMap::new();
        for def in TEMPLATES {
            let template = Template::new(get(def)?.trim_end().to_string());
            for slot in def.required {
                if template.position(slot).is_none() {
                    return Err(PromptError::MissingSlot { name: def.name, slot });
                }
            }
            loaded.insert(def.name, template);
        }
        let mut take = |name| loaded.remove(name).expect("every template is loaded");
        let set = PromptSet {
            annotation: take("annotation"),
            annotation_retry: take("annotation_retry"),
            compression: take("compression"),
            response: take("response"),
            questions: take("questions"),
            claims: take("claims"),
            verdicts: take("verdicts"),
            format_retry: take("format_retry"),
        };
        set.check_response_order()?;
        Ok(set)
    }

    fn check_response_order(&self) -> Result<(), PromptError> {
        let r = &self.response;
        let (p, m, q) = (
            r.position(slots::PATIENT_CONTEXT),
            r.position(slots::MEDICAL_KNOWLEDGE),
            r.position(slots::QUESTION),
        );
        let ordered = matches!((p, m, q), (Some(p), Some(m), Some(q)) if p < m && m < q);
        let question_last = r.text().trim_end().ends_with(&format!("{{{}}}", slots::QUESTION));
        if ordered && question_last {
            Ok(())
        } else {
            Err(PromptError::SlotOrder { name: "response" })
        }
    }
}

/// The three patient-context categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    History,
    Diagnostics,
    Medications,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::History, Category::Diagnostics, Category::Medications];

    pub fn key(self) -> &'static str {
        match self {
            Category::History => "history",
            Category::Diagnostics => "diagnostics",
            Category::Medications => "medications",
        }
    }
}

#[derive(Debug, Deserialize)]
struct HeadingFile {
    version: u32,
    history: HeadingEntry,
    diagnostics: HeadingEntry,
    medications: HeadingEntry,
}

#[derive(Debug, Clone, Deserialize)]
struct HeadingEntry {
    canonical: String,
    aliases: Vec<String>,
}

/// Case-insensitive heading aliases per category, versioned with the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadingAliases {
    pub version: u32,
    canonical: [String; 3],
    /// (lowercased alias, category), longest alias first.
    aliases: Vec<(String, Category)>,
}

const DEFAULT_HEADINGS: &str = include_str!("../../../config/headings.toml");

impl Default for HeadingAliases {
    fn default() -> Self {
        Self::parse(DEFAULT_HEADINGS).expect("bundled heading config is valid")
    }
}

impl HeadingAliases {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)
            .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let file: HeadingFile = toml::from_str(text).map_err(|e| PromptError::Headings(e.to_string()))?;
        let mut aliases = Vec::new();
        for (cat, entry) in [
            (Category::History, &file.history),
            (Category::Diagnostics, &file.diagnostics),
            (Category::Medications, &file.medications),
        ] {
            if entry.canonical.trim().is_empty() {
                return Err(PromptError::Headings(format!("{} has an empty canonical heading", cat.key())));
            }
            aliases.push((entry.canonical.to_lowercase(), cat));
            aliases.extend(entry.aliases.iter().map(|a| (a.trim().to_lowercase(), cat)));
        }
        aliases.retain(|(a, _)| !a.is_empty());
        aliases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        aliases.dedup();
        Ok(HeadingAliases {
            version: file.version,
            canonical: [
                file.history.canonical,
                file.diagnostics.canonical,
                file.medications.canonical,
            ],
            aliases,
        })
    }

    pub fn canonical(&self, category: Category) -> &str {
        &self.canonical[category as usize]
    }

    /// Aliases ordered longest first.
    pub fn aliases(&self) -> &[(String, Category)] {
        &self.aliases
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn render_is_single_pass() {
        let t = Template::new("Q: {question} / {unknown} / {question}");
        let out = t.render(&values(&[("question", "use {question}?")]));
        assert_eq!(out, "Q: use {question}? / {unknown} / use {question}?");
    }

    #[test]
    fn bundled_annotation_template_is_the_table_layout() {
        let p = PromptSet::default();
        let text = p.annotation.text();
        assert!(text.starts_with("Given the following {medical transcript} of a patient, create a detailed summary by categories."));
        assert!(text.contains("- Prescribed medications & Instruction:"));
        assert!(text.ends_with("Medical Transcript:\n{transcript}"));
    }

    #[test]
    fn response_template_order_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("response.txt"),
            "{question}\n{patient_context}\n{medical_knowledge}",
        )
        .unwrap();
        assert!(matches!(PromptSet::load(dir.path()), Err(PromptError::SlotOrder { .. })));
    }

    #[test]
    fn override_directory_replaces_single_template() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("claims.txt"), "Split: {text}").unwrap();
        let p = PromptSet::load(dir.path()).unwrap();
        assert_eq!(p.claims.text(), "Split: {text}");
        assert_eq!(p.response, PromptSet::default().response);
    }

    #[test]
    fn missing_slot_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("compression.txt"), "just {question}").unwrap();
        assert!(matches!(
            PromptSet::load(dir.path()),
            Err(PromptError::MissingSlot { name: "compression", slot: "document" })
        ));
    }

    #[test]
    fn headings_cover_both_third_category_variants() {
        let h = HeadingAliases::default();
        assert_eq!(h.version, 1);
        let find = |s: &str| h.aliases().iter().find(|(a, _)| a == s).map(|(_, c)| *c);
        assert_eq!(find("prescribed medications & instruction"), Some(Category::Medications));
        assert_eq!(find("prescribed medications and further instructions"), Some(Category::Medications));
        assert_eq!(h.canonical(Category::Diagnostics), "Executed diagnostics");
        let lens: Vec<usize> = h.aliases().iter().map(|(a, _)| a.len()).collect();
        assert!(lens.windows(2).all(|w| w[0] >= w[1]));
    }
}
