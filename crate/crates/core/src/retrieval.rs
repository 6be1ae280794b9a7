//! Dual retrieval: the patient-context retriever, the medical-knowledge
//! retriever whose probe is augmented with the patient evidence, and
//! query-conditioned extractive compression.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Metadata, PATIENT_ID_KEY};
use crate::embedding::{embed_one, EmbeddingError, EmbeddingProvider};
use crate::error::Stage;
use crate::llm::{ChatProvider, ChatRequest, Purpose};
use crate::prompts::{slots, PromptSet};
use crate::text;
use crate::vectorstore::{MetadataFilter, SearchHit, SharedStore, StoreError};

/// Sentinel reply meaning a retrieved item has nothing relevant to the query.
pub const NO_RELEVANT_CONTENT: &str = "NO_RELEVANT_CONTENT";

/// Separator between the query and each evidence text in a knowledge probe.
pub const PROBE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    PatientContext,
    MedicalKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub origin: Origin,
    pub entry_id: String,
    pub document_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub rank: usize,
    pub score: f64,
    /// Possibly compressed text; equals `original_text` unless `compressed`.
    pub text: String,
    pub original_text: String,
    pub compressed: bool,
    pub dropped: bool,
    /// Set when a compression reply was rejected (or the call failed) and
    /// the original text was kept.
    pub compression_fallback: bool,
    pub metadata: Metadata,
}

impl Evidence {
    fn from_hit(origin: Origin, hit: SearchHit) -> Self {
        Evidence {
            origin,
            entry_id: hit.entry_id,
            document_id: hit.chunk.document_id,
            title: hit.metadata.get("title").cloned(),
            rank: hit.rank,
            score: hit.score,
            text: hit.chunk.text.clone(),
            original_text: hit.chunk.text,
            compressed: false,
            dropped: false,
            compression_fallback: false,
            metadata: hit.metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_patient: usize,
    pub k_knowledge: usize,
    /// Compression of knowledge-side evidence.
    pub compression_enabled: bool,
    /// Compression of patient-side evidence.
    pub compress_patient: bool,
    pub min_score: Option<f64>,
    pub compression_max_tokens: u32,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_patient: 3,
            k_knowledge: 3,
            compression_enabled: true,
            compress_patient: false,
            min_score: None,
            compression_max_tokens: 1024,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k_patient == 0 || self.k_knowledge == 0 {
            return Err(RetrievalError::InvalidConfig("k values must be at least 1".into()));
        }
        if let Some(m) = self.min_score {
            if !m.is_finite() {
                return Err(RetrievalError::InvalidConfig("min_score must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no patient context stored for patient {0}")]
    UnknownPatient(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid retrieval configuration: {0}")]
    InvalidConfig(String),
    #[error("{stage}: {source}")]
    Embedding {
        stage: Stage,
        #[source]
        source: EmbeddingError,
    },
    #[error("{stage}: {source}")]
    Store {
        stage: Stage,
        #[source]
        source: StoreError,
    },
}

impl RetrievalError {
    pub fn stage(&self) -> Stage {
        match self {
            RetrievalError::UnknownPatient(_) | RetrievalError::EmptyQuery | RetrievalError::InvalidConfig(_) => {
                Stage::PatientRetrieval
            }
            RetrievalError::Embedding { .. } => Stage::Embedding,
            RetrievalError::Store { stage, .. } => *stage,
        }
    }
}

/// Outcome of compressing one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compression {
    Compressed(String),
    Dropped,
    /// Reply rejected; the reason is recorded in the trace.
    Fallback(String),
}

/// Checks that every sentence of `reply` occurs in `original` after
/// whitespace normalization, and that the reply is no longer than the
/// original.
pub fn validate_extractive(reply: &str, original: &str) -> Result<(), String> {
    let norm_original = text::normalize_whitespace(original);
    let sentences = text::split_sentences(reply);
    if sentences.is_empty() {
        return Err("empty compression reply".into());
    }
    for s in sentences {
        if !norm_original.contains(&text::normalize_whitespace(s)) {
            return Err(format!("sentence not found in original: {s:?}"));
        }
    }
    if reply.chars().count() > original.chars().count() {
        return Err("compressed text is longer than the original".into());
    }
    Ok(())
}

/// Asks the model to extract query-relevant sentences from `original`.
/// Never fails: provider errors and invalid replies become a fallback.
pub fn compress_text(
    llm: &dyn ChatProvider,
    prompts: &PromptSet,
    query: &str,
    original: &str,
    max_tokens: u32,
) -> Compression {
    let mut values = BTreeMap::new();
    values.insert(slots::QUESTION.to_string(), query.to_string());
    values.insert(slots::DOCUMENT.to_string(), original.to_string());
    let request = ChatRequest::new(llm.model_name(), Purpose::Compression, prompts.compression.render(&values))
        .with_slots(values)
        .with_max_tokens(max_tokens);
    let reply = match llm.complete(&request) {
        Ok(r) => r.content,
        Err(e) => return Compression::Fallback(format!("compression call failed: {e}")),
    };
    let reply = reply.trim();
    if reply == NO_RELEVANT_CONTENT {
        return Compression::Dropped;
    }
    match validate_extractive(reply, original) {
        Ok(()) => Compression::Compressed(reply.to_string()),
        Err(reason) => Compression::Fallback(reason),
    }
}

/// Compression decision recorded for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionDecision {
    pub entry_id: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Compresses each evidence item in place (in parallel, order preserved).
pub fn compress_evidence(
    evidence: &mut [Evidence],
    query: &str,
    llm: &dyn ChatProvider,
    prompts: &PromptSet,
    max_tokens: u32,
) -> Vec<CompressionDecision> {
    let outcomes: Vec<Compression> = evidence
        .par_iter()
        .map(|e| compress_text(llm, prompts, query, &e.original_text, max_tokens))
        .collect();
    evidence
        .iter_mut()
        .zip(outcomes)
        .map(|(e, outcome)| {
            let (label, reason) = match outcome {
                Compression::Compressed(t) => {
                    e.text = t;
                    e.compressed = true;
                    ("compressed", None)
                }
                Compression::Dropped => {
                    e.dropped = true;
                    ("dropped", None)
                }
                Compression::Fallback(reason) => {
                    e.compression_fallback = true;
                    ("fallback", Some(reason))
                }
            };
            CompressionDecision { entry_id: e.entry_id.clone(), outcome: label.to_string(), reason }
        })
        .collect()
}

/// Probe for the knowledge store: the query, then each evidence text in
/// rank order, separated by blank lines. Dropped evidence is skipped.
pub fn knowledge_probe(query: &str, patient_evidence: &[Evidence]) -> String {
    let mut probe = query.to_string();
    for e in patient_evidence.iter().filter(|e| !e.dropped) {
        probe.push_str(PROBE_SEPARATOR);
        probe.push_str(&e.text);
    }
    probe
}

/// Read-only view over both stores plus the ports retrieval needs.
pub struct Retriever<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub llm: &'a dyn ChatProvider,
    pub prompts: &'a PromptSet,
    pub patient_store: &'a SharedStore,
    pub knowledge_store: &'a SharedStore,
    pub config: &'a RetrievalConfig,
}

/// Everything retrieval produced for one question, for assembly and trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub patient: Vec<Evidence>,
    pub knowledge: Vec<Evidence>,
    pub probe: String,
    pub compression: Vec<CompressionDecision>,
}

impl Retriever<'_> {
    fn search(
        &self,
        store: &SharedStore,
        text: &str,
        k: usize,
        filter: Option<&MetadataFilter>,
        stage: Stage,
        origin: Origin,
    ) -> Result<Vec<Evidence>, RetrievalError> {
        let guard = store.read();
        if guard.is_empty() {
            return Ok(Vec::new());
        }
        let query = embed_one(text, self.embedder).map_err(|source| RetrievalError::Embedding { stage, source })?;
        let hits = guard.search(&query, k, filter).map_err(|source| RetrievalError::Store { stage, source })?;
        drop(guard);
        Ok(hits
            .into_iter()
            .filter(|h| self.config.min_score.map_or(true, |m| h.score >= m))
            .map(|h| Evidence::from_hit(origin, h))
            .collect())
    }

    /// Top `k_patient` chunks of this patient's stored context.
    pub fn retrieve_patient_context(&self, query: &str, patient_id: &str) -> Result<Vec<Evidence>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let filter = MetadataFilter::eq(PATIENT_ID_KEY, patient_id);
        if !self.patient_store.read().any_matching(&filter) {
            return Err(RetrievalError::UnknownPatient(patient_id.to_string()));
        }
        self.search(
            self.patient_store,
            query,
            self.config.k_patient,
            Some(&filter),
            Stage::PatientRetrieval,
            Origin::PatientContext,
        )
    }

    /// Top `k_knowledge` knowledge chunks for the augmented probe.
    pub fn retrieve_medical_knowledge(
        &self,
        query: &str,
        patient_evidence: &[Evidence],
    ) -> Result<(String, Vec<Evidence>), RetrievalError> {
        let probe = knowledge_probe(query, patient_evidence);
        let hits = self.search(
            self.knowledge_store,
            &probe,
            self.config.k_knowledge,
            None,
            Stage::KnowledgeRetrieval,
            Origin::MedicalKnowledge,
        )?;
        Ok((probe, hits))
    }

    /// Patient retrieval, optional patient-side compression, augmented
    /// knowledge retrieval, then knowledge-side compression.
    pub fn retrieve(&self, query: &str, patient_id: &str) -> Result<RetrievalOutcome, RetrievalError> {
        self.config.validate()?;
        let mut patient = self.retrieve_patient_context(query, patient_id)?;
        let mut compression = Vec::new();
        if self.config.compress_patient {
            compression.extend(compress_evidence(
                &mut patient,
                query,
                self.llm,
                self.prompts,
                self.config.compression_max_tokens,
            ));
        }
        let (probe, mut knowledge) = self.retrieve_medical_knowledge(query, &patient)?;
        if self.config.compression_enabled {
            compression.extend(compress_evidence(
                &mut knowledge,
                query,
                self.llm,
                self.prompts,
                self.config.compression_max_tokens,
            ));
        }
        Ok(RetrievalOutcome { patient, knowledge, probe, compression })
    }
}
