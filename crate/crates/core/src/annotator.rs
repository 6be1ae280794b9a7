//! Structures an unstructured transcript into the three-category patient
//! context: history and symptoms, executed diagnostics, and prescribed
//! medications with instructions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::corpus::{Document, DocumentSource};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, Purpose, Role};
use crate::prompts::{slots, Category, HeadingAliases, PromptSet};
use crate::provider::ProviderError;

/// Body used for a category the model left empty.
pub const NOT_STATED: &str = "Not stated in transcript.";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("document {0} is not a patient transcript")]
    NotTranscript(String),
    #[error("transcript {0} has no patient_id metadata")]
    MissingPatientId(String),
    #[error("transcript body is empty")]
    EmptyBody,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("model reply could not be parsed after a corrective re-prompt: {source}")]
    Unparseable {
        #[source]
        source: ParseError,
        raw_reply: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("annotation is missing categories: {}", .missing.iter().map(|c| c.key()).collect::<Vec<_>>().join(", "))]
pub struct ParseError {
    pub missing: Vec<Category>,
}

#[derive(Debug, Error)]
pub enum ContextFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("context file header line {line} is malformed")]
    Header { line: usize },
    #[error("context file lacks header field {0}")]
    MissingField(&'static str),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Section bodies in category order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTexts {
    pub history_and_symptoms: String,
    pub executed_diagnostics: String,
    pub medications_and_instructions: String,
}

impl CategoryTexts {
    pub fn get(&self, c: Category) -> &str {
        match c {
            Category::History => &self.history_and_symptoms,
            Category::Diagnostics => &self.executed_diagnostics,
            Category::Medications => &self.medications_and_instructions,
        }
    }

    /// Canonical headed layout: each canonical heading with a colon on its
    /// own line, its body below, sections separated by a blank line.
    pub fn to_headed_text(&self, headings: &HeadingAliases) -> String {
        Category::ALL
            .iter()
            .map(|c| format!("{}:\n{}", headings.canonical(*c), self.get(*c)))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPatientContext {
    pub patient_id: String,
    #[serde(flatten)]
    pub sections: CategoryTexts,
    pub source_document_id: String,
    pub annotation_model: String,
    pub created_at: DateTime<Utc>,
    /// The model reply the sections were parsed from, kept for audit.
    pub raw_reply: String,
}

impl AnnotatedPatientContext {
    /// The headed three-section text that gets chunked and embedded.
    pub fn body_text(&self, headings: &HeadingAliases) -> String {
        self.sections.to_headed_text(headings)
    }

    /// Persisted form: `key: value` header lines, a blank line, then the
    /// canonical headed sections.
    pub fn to_file_text(&self, headings: &HeadingAliases) -> String {
        format!(
            "patient_id: {}\nsource_document_id: {}\nannotation_model: {}\ncreated_at: {}\n\n{}\n",
            self.patient_id,
            self.source_document_id,
            self.annotation_model,
            self.created_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            self.body_text(headings)
        )
    }

    pub fn from_file_text(
        text: &str,
        raw_reply: String,
        headings: &HeadingAliases,
    ) -> Result<Self, ContextFileError> {
        let (head, body) = text.split_once("\n\n").unwrap_or((text, ""));
        let mut fields = BTreeMap::new();
        for (i, line) in head.lines().enumerate() {
            let (k, v) = line.split_once(": ").ok_or(ContextFileError::Header { line: i + 1 })?;
            fields.insert(k.trim(), v.trim().to_string());
        }
        let mut take = |k: &'static str| fields.remove(k).ok_or(ContextFileError::MissingField(k));
        let patient_id = take("patient_id")?;
        let source_document_id = take("source_document_id")?;
        let annotation_model = take("annotation_model")?;
        let created_at = DateTime::parse_from_rfc3339(&take("created_at")?)
            .map_err(|_| ContextFileError::MissingField("created_at"))?
            .with_timezone(&Utc);
        Ok(AnnotatedPatientContext {
            patient_id,
            sections: parse_annotation(body, headings)?,
            source_document_id,
            annotation_model,
            created_at,
            raw_reply,
        })
    }

    pub fn context_path(dir: &Path, patient_id: &str) -> PathBuf {
        dir.join(format!("{patient_id}.context.txt"))
    }

    pub fn reply_path(dir: &Path, patient_id: &str) -> PathBuf {
        dir.join(format!("{patient_id}.reply.txt"))
    }

    /// Writes `<patient_id>.context.txt` and the raw reply beside it.
    pub fn save(&self, dir: &Path, headings: &HeadingAliases) -> Result<(), ContextFileError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ContextFileError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let ctx = Self::context_path(dir, &self.patient_id);
        fs::write(&ctx, self.to_file_text(headings)).map_err(io(&ctx))?;
        let reply = Self::reply_path(dir, &self.patient_id);
        fs::write(&reply, &self.raw_reply).map_err(io(&reply))?;
        Ok(())
    }

    pub fn open(dir: &Path, patient_id: &str, headings: &HeadingAliases) -> Result<Self, ContextFileError> {
        let ctx = Self::context_path(dir, patient_id);
        let text = fs::read_to_string(&ctx).map_err(|source| ContextFileError::Io { path: ctx.clone(), source })?;
        let raw = fs::read_to_string(Self::reply_path(dir, patient_id)).unwrap_or_default();
        Self::from_file_text(&text, raw, headings)
    }
}

/// Strips list bullets, heading hashes, numbering and bold markers from the
/// start of a line.
fn strip_line_decoration(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        for prefix in ["**", "__", "#", "-", "*", "•", ">"] {
            s = s.strip_prefix(prefix).unwrap_or(s).trim_start();
        }
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// If `line` opens a category section, returns the category and any text
/// following the heading on the same line.
fn match_heading<'a>(line: &'a str, headings: &HeadingAliases) -> Option<(Category, &'a str)> {
    let s = strip_line_decoration(line);
    for (alias, category) in headings.aliases() {
        let n = alias.len();
        if s.len() < n || !s.is_char_boundary(n) || !s[..n].eq_ignore_ascii_case(alias) {
            continue;
        }
        let mut rest = s[n..].trim_start_matches(['*', '_']).trim_start();
        if rest.is_empty() {
            return Some((*category, ""));
        }
        if let Some(after) = rest.strip_prefix(':') {
            rest = after.trim_start_matches(['*', '_']).trim();
            return Some((*category, rest));
        }
    }
    None
}

/// Splits a reply into the three category sections by heading.
///
/// Headings are matched case-insensitively against [`HeadingAliases`],
/// after stripping bullets, `#`, numbering and `**`. A heading must stand
/// alone on its line or be followed by a colon; text after the colon starts
/// the section body. Sections may come in any order; a repeated heading
/// appends to its section; text before the first heading is ignored. An
/// empty section body becomes [`NOT_STATED`].
pub fn parse_annotation(reply: &str, headings: &HeadingAliases) -> Result<CategoryTexts, ParseError> {
    let mut sections: BTreeMap<Category, Vec<&str>> = BTreeMap::new();
    let mut current: Option<Category> = None;
    for line in reply.lines() {
        let mut rest = line;
        let mut matched = false;
        while let Some((category, after)) = match_heading(rest, headings) {
            sections.entry(category).or_default();
            current = Some(category);
            matched = true;
            rest = after;
            if rest.is_empty() {
                break;
            }
        }
        if let Some(c) = current {
            if !matched || !rest.is_empty() {
                sections.entry(c).or_default().push(if matched { rest } else { line });
            }
        }
    }

    let missing: Vec<Category> = Category::ALL.iter().copied().filter(|c| !sections.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(ParseError { missing });
    }
    let body = |c: Category| {
        let text = sections[&c].join("\n");
        let text = text.trim();
        if text.is_empty() {
            NOT_STATED.to_string()
        } else {
            text.to_string()
        }
    };
    Ok(CategoryTexts {
        history_and_symptoms: body(Category::History),
        executed_diagnostics: body(Category::Diagnostics),
        medications_and_instructions: body(Category::Medications),
    })
}

/// Zero-shot transcript annotation at temperature 0, with one corrective
/// re-prompt when the first reply does not parse.
pub struct Annotator<'a> {
    pub llm: &'a dyn ChatProvider,
    pub prompts: &'a PromptSet,
    pub headings: &'a HeadingAliases,
    pub clock: &'a dyn Clock,
    pub max_tokens: u32,
}

impl Annotator<'_> {
    pub fn annotate_transcript(&self, doc: &Document) -> Result<AnnotatedPatientContext, AnnotationError> {
        if doc.source != DocumentSource::PatientTranscript {
            return Err(AnnotationError::NotTranscript(doc.id.clone()));
        }
        let patient_id = doc.patient_id().ok_or_else(|| AnnotationError::MissingPatientId(doc.id.clone()))?;
        if doc.body.trim().is_empty() {
            return Err(AnnotationError::EmptyBody);
        }

        let mut values = BTreeMap::new();
        values.insert(slots::TRANSCRIPT.to_string(), doc.body.clone());
        let prompt = self.prompts.annotation.render(&values);
        let mut request = ChatRequest::new(self.llm.model_name(), Purpose::Annotation, prompt)
            .with_slots(values)
            .with_max_tokens(self.max_tokens);

        let first = self.llm.complete(&request)?.content;
        let (reply, sections) = match parse_annotation(&first, self.headings) {
            Ok(s) => (first, s),
            Err(_) => {
                request.messages.push(ChatMessage::assistant(first));
                request.messages.push(ChatMessage {
                    role: Role::User,
                    content: self.prompts.annotation_retry.text().to_string(),
                });
                let second = self.llm.complete(&request)?.content;
                match parse_annotation(&second, self.headings) {
                    Ok(s) => (second, s),
                    Err(source) => return Err(AnnotationError::Unparseable { source, raw_reply: second }),
                }
            }
        };

        Ok(AnnotatedPatientContext {
            patient_id: patient_id.to_string(),
            sections,
            source_document_id: doc.id.clone(),
            annotation_model: self.llm.model_name().to_string(),
            created_at: self.clock.now(),
            raw_reply: reply,
        })
    }
}
