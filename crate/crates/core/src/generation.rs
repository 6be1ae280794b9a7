//! Context assembly (patient evidence, then medical evidence, then the
//! question) and answer generation with citation extraction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatProvider, ChatRequest, Purpose};
use crate::prompts::{slots, PromptSet};
use crate::provider::ProviderError;
use crate::retrieval::Evidence;

pub const NO_PATIENT_EVIDENCE: &str = "(no patient context retrieved)";
pub const NO_MEDICAL_EVIDENCE: &str = "(no medical knowledge retrieved)";

/// Attached to every answer returned to clients.
pub const DISCLAIMER: &str = "This answer is generated from your records and reference material for \
    information only. It is not medical advice; contact your care team or emergency services for \
    urgent concerns.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: 0.0, max_output_tokens: 1024 }
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("question is empty")]
    EmptyQuery,
    #[error("temperature must be a finite value >= 0")]
    InvalidTemperature,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("model returned an empty answer")]
    EmptyAnswer,
}

/// A bracket label shown to the model and the entry it stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceLabel {
    pub label: String,
    pub entry_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedContext {
    pub patient_evidence: Vec<Evidence>,
    pub medical_evidence: Vec<Evidence>,
    pub query: String,
    /// Rendered patient block.
    pub patient_block: String,
    /// Rendered medical block.
    pub medical_block: String,
    /// Full prompt sent to the generator.
    pub rendered: String,
    pub labels: Vec<EvidenceLabel>,
    /// True when no usable evidence was available on either side.
    pub no_evidence: bool,
}

impl AugmentedContext {
    /// Entry ids of the evidence actually placed in the prompt.
    pub fn provided_entry_ids(&self) -> Vec<&str> {
        self.labels.iter().map(|l| l.entry_id.as_str()).collect()
    }
}

fn render_block(items: &[&Evidence], prefix: char, empty: &str, labels: &mut Vec<EvidenceLabel>) -> String {
    if items.is_empty() {
        return empty.to_string();
    }
    items
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = format!("{prefix}{}", i + 1);
            labels.push(EvidenceLabel { label: label.clone(), entry_id: e.entry_id.clone() });
            match (&e.title, prefix) {
                (Some(title), 'K') => format!("[{label}] Document {} ({title}):\n{}", i + 1, e.text),
                (None, 'K') => format!("[{label}] Document {}:\n{}", i + 1, e.text),
                _ => format!("[{label}] {}", e.text),
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Renders the response template with the labelled patient block, the
/// labelled medical block and the query. Dropped evidence is left out.
pub fn assemble_context(
    patient_evidence: &[Evidence],
    medical_evidence: &[Evidence],
    query: &str,
    prompts: &PromptSet,
) -> Result<AugmentedContext, GenerationError> {
    if query.trim().is_empty() {
        return Err(GenerationError::EmptyQuery);
    }
    let patient: Vec<&Evidence> = patient_evidence.iter().filter(|e| !e.dropped).collect();
    let medical: Vec<&Evidence> = medical_evidence.iter().filter(|e| !e.dropped).collect();
    let mut labels = Vec::new();
    let patient_block = render_block(&patient, 'P', NO_PATIENT_EVIDENCE, &mut labels);
    let medical_block = render_block(&medical, 'K', NO_MEDICAL_EVIDENCE, &mut labels);

    let mut values = BTreeMap::new();
    values.insert(slots::PATIENT_CONTEXT.to_string(), patient_block.clone());
    values.insert(slots::MEDICAL_KNOWLEDGE.to_string(), medical_block.clone());
    values.insert(slots::QUESTION.to_string(), query.to_string());
    let rendered = prompts.response.render(&values);

    Ok(AugmentedContext {
        patient_evidence: patient_evidence.to_vec(),
        medical_evidence: medical_evidence.to_vec(),
        query: query.to_string(),
        no_evidence: patient.is_empty() && medical.is_empty(),
        patient_block,
        medical_block,
        rendered,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub answer: String,
    /// Entry ids cited by the answer; always drawn from the context.
    pub citations: Vec<String>,
    /// True when the answer carried no recognisable label and every
    /// provided item was cited instead.
    pub citations_inferred: bool,
    pub model_name: String,
}

/// Entry ids for the `[P1]`/`[K2]` labels in `answer`, in first-mention
/// order. Labels not present in the context are ignored.
pub fn extract_citations(answer: &str, labels: &[EvidenceLabel]) -> Vec<String> {
    let mut found: Vec<(usize, &str)> = Vec::new();
    for l in labels {
        if let Some(pos) = answer.find(&format!("[{}]", l.label)) {
            found.push((pos, &l.entry_id));
        }
    }
    found.sort();
    let mut out: Vec<String> = Vec::new();
    for (_, id) in found {
        if !out.iter().any(|o| o == id) {
            out.push(id.to_string());
        }
    }
    out
}

/// One provider call at the configured temperature.
pub fn generate_response(
    context: &AugmentedContext,
    llm: &dyn ChatProvider,
    config: &GenerationConfig,
) -> Result<GeneratedAnswer, GenerationError> {
    if !(config.temperature.is_finite() && config.temperature >= 0.0) {
        return Err(GenerationError::InvalidTemperature);
    }
    let mut values = BTreeMap::new();
    values.insert(slots::PATIENT_CONTEXT.to_string(), context.patient_block.clone());
    values.insert(slots::MEDICAL_KNOWLEDGE.to_string(), context.medical_block.clone());
    values.insert(slots::QUESTION.to_string(), context.query.clone());
    let request = ChatRequest::new(llm.model_name(), Purpose::Answer, context.rendered.clone())
        .with_slots(values)
        .with_temperature(config.temperature)
        .with_max_tokens(config.max_output_tokens);
    let reply = llm.complete(&request)?;
    let answer = reply.content.trim().to_string();
    if answer.is_empty() {
        return Err(GenerationError::EmptyAnswer);
    }
    let mut citations = extract_citations(&answer, &context.labels);
    let citations_inferred = citations.is_empty();
    if citations_inferred {
        citations = context.labels.iter().map(|l| l.entry_id.clone()).collect();
    }
    Ok(GeneratedAnswer { answer, citations, citations_inferred, model_name: llm.model_name().to_string() })
}
