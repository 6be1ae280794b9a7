//! The engine facade: configuration, provider wiring, both stores, and the
//! end-to-end operations shared by the command line, the HTTP service and
//! the Python bindings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{AnnotatedPatientContext, AnnotationError, Annotator, ContextFileError};
use crate::clock::{Clock, FixedClock, SystemClock};
use crate::config::{Config, ConfigError};
use crate::corpus::{
    load_document, load_document_file, split_text, CorpusError, Document, DocumentFormat, DocumentSource, Metadata,
    PATIENT_ID_KEY,
};
use crate::embedding::{
    embed_batch, EmbeddingError, EmbeddingProvider, EmbeddingVector, HttpEmbedder, MockEmbedder, RecordingEmbedder,
    ReplayEmbedder,
};
use crate::error::{ErrorClass, Stage};
use crate::evaluation::kappa::{fleiss_kappa, KappaError, KappaResult};
use crate::evaluation::questions::{generate_questions, GeneratedQuestion, QuestionError};
use crate::evaluation::sheets::{load_dataset, load_ratings, DatasetRow, SheetError};
use crate::evaluation::{render_report_table, run_eval, EvalError, EvalReport, ScoringPorts};
use crate::generation::{assemble_context, generate_response, AugmentedContext, GenerationError, DISCLAIMER};
use crate::llm::{ChatProvider, ChatReply, ChatRequest, HttpChat, MockChat, RecordingChat, ReplayChat};
use crate::prompts::{HeadingAliases, PromptError, PromptSet};
use crate::provider::{ProviderError, ProviderMode, Reachability};
use crate::replay::{FixtureBook, FixtureError};
use crate::retrieval::{CompressionDecision, RetrievalError, Retriever};
use crate::trace::{trace_id, Trace};
use crate::vectorstore::{store_file_name, MetadataFilter, NewEntry, SharedStore, StoreError, StoreKind, VectorStore};

/// A failure anywhere in the engine, tagged with where it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineError {
    pub stage: Stage,
    pub class: ErrorClass,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
    /// Model reply kept for audit when a reply could not be parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

impl PipelineError {
    pub fn new(stage: Stage, class: ErrorClass, message: impl Into<String>) -> Self {
        PipelineError { stage, class, message: message.into(), trace_id: None, raw_reply: None }
    }

    fn with_trace(mut self, trace_id: &str) -> Self {
        self.trace_id = Some(trace_id.to_string());
        self
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)?;
        if let Some(t) = &self.trace_id {
            write!(f, " (trace {t})")?;
        }
        Ok(())
    }
}

impl std::error::Error for PipelineError {}

fn provider_class(e: &ProviderError) -> ErrorClass {
    match e {
        ProviderError::NotConfigured(_) => ErrorClass::Config,
        _ => ErrorClass::Provider,
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string())
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string())
    }
}

impl From<FixtureError> for PipelineError {
    fn from(e: FixtureError) -> Self {
        PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string())
    }
}

fn corpus_error(e: CorpusError) -> PipelineError {
    let class = match e {
        CorpusError::Io { .. } => ErrorClass::Io,
        _ => ErrorClass::Validation,
    };
    PipelineError::new(Stage::Ingestion, class, e.to_string())
}

fn embedding_error(e: EmbeddingError) -> PipelineError {
    let class = match &e {
        EmbeddingError::EmptyText { .. } | EmbeddingError::InvalidBatchSize => ErrorClass::Validation,
        EmbeddingError::Provider(p) => provider_class(p),
        _ => ErrorClass::Provider,
    };
    PipelineError::new(Stage::Embedding, class, e.to_string())
}

fn store_error(e: StoreError) -> PipelineError {
    let class = match e {
        StoreError::Io { .. } => ErrorClass::Io,
        StoreError::UnsupportedVersion { .. } | StoreError::Corrupt { .. } | StoreError::DimensionMismatch { .. } => {
            ErrorClass::Config
        }
        _ => ErrorClass::Validation,
    };
    PipelineError::new(Stage::Storage, class, e.to_string())
}

fn annotation_error(e: AnnotationError) -> PipelineError {
    match e {
        AnnotationError::Provider(p) => PipelineError::new(Stage::Annotation, provider_class(&p), p.to_string()),
        AnnotationError::Unparseable { source, raw_reply } => PipelineError {
            raw_reply: Some(raw_reply),
            ..PipelineError::new(
                Stage::Annotation,
                ErrorClass::Provider,
                format!("model reply could not be parsed after a corrective re-prompt: {source}"),
            )
        },
        other => PipelineError::new(Stage::Annotation, ErrorClass::Validation, other.to_string()),
    }
}

fn retrieval_error(e: RetrievalError) -> PipelineError {
    let stage = e.stage();
    let class = match &e {
        RetrievalError::UnknownPatient(_) => ErrorClass::NotFound,
        RetrievalError::EmptyQuery => ErrorClass::Validation,
        RetrievalError::InvalidConfig(_) => ErrorClass::Config,
        RetrievalError::Embedding { source, .. } => match source {
            EmbeddingError::Provider(p) => provider_class(p),
            _ => ErrorClass::Provider,
        },
        RetrievalError::Store { .. } => ErrorClass::Config,
    };
    PipelineError::new(stage, class, e.to_string())
}

fn generation_error(e: GenerationError) -> PipelineError {
    match e {
        GenerationError::EmptyQuery => PipelineError::new(Stage::Assembly, ErrorClass::Validation, e.to_string()),
        GenerationError::InvalidTemperature => PipelineError::new(Stage::Generation, ErrorClass::Config, e.to_string()),
        GenerationError::Provider(p) => PipelineError::new(Stage::Generation, provider_class(&p), p.to_string()),
        GenerationError::EmptyAnswer => PipelineError::new(Stage::Generation, ErrorClass::Provider, e.to_string()),
    }
}

fn sheet_error(e: SheetError) -> PipelineError {
    let class = match e {
        SheetError::Io { .. } => ErrorClass::Io,
        _ => ErrorClass::Validation,
    };
    PipelineError::new(Stage::Evaluation, class, e.to_string())
}

/// Builds a chat provider for a model name.
pub trait ChatFactory: Send + Sync {
    fn chat(&self, model: &str) -> Result<Arc<dyn ChatProvider>, ProviderError>;
}

impl<F> ChatFactory for F
where
    F: Fn(&str) -> Result<Arc<dyn ChatProvider>, ProviderError> + Send + Sync,
{
    fn chat(&self, model: &str) -> Result<Arc<dyn ChatProvider>, ProviderError> {
        self(model)
    }
}

/// Stand-in used when the configured providers cannot be constructed
/// (for example, live mode without an API key). Every call fails.
struct Unconfigured {
    model: String,
    reason: String,
}

impl EmbeddingProvider for Unconfigured {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, _: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        Err(ProviderError::NotConfigured(self.reason.clone()))
    }

    fn probe(&self) -> Reachability {
        Reachability::Unreachable(self.reason.clone())
    }
}

impl ChatProvider for Unconfigured {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, _: &ChatRequest) -> Result<ChatReply, ProviderError> {
        Err(ProviderError::NotConfigured(self.reason.clone()))
    }

    fn probe(&self) -> Reachability {
        Reachability::Unreachable(self.reason.clone())
    }
}

/// Embedding provider plus a chat factory, with an optional fixture book
/// that records every exchange.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub chat: Arc<dyn ChatFactory>,
    pub recorder: Option<(Arc<FixtureBook>, PathBuf)>,
    pub configured: bool,
}

impl Providers {
    /// Providers for the configured mode. `env` supplies secrets.
    pub fn from_config(config: &Config, env: impl Fn(&str) -> Option<String>) -> Result<Self, PipelineError> {
        match config.mode {
            ProviderMode::Mock => {
                let embedder = MockEmbedder::new(config.embedding.mock_seed, config.embedding.mock_dimension)
                    .map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string()))?;
                Ok(Providers {
                    embedder: Arc::new(embedder),
                    chat: Arc::new(|m: &str| Ok(Arc::new(MockChat::new(m)) as Arc<dyn ChatProvider>)),
                    recorder: None,
                    configured: true,
                })
            }
            ProviderMode::Replay => {
                if config.fixtures.is_empty() {
                    return Err(PipelineError::new(Stage::Config, ErrorClass::Config, "replay mode needs at least one fixture file"));
                }
                let book = Arc::new(FixtureBook::load_all(&config.fixtures)?);
                let chat_book = book.clone();
                Ok(Providers {
                    embedder: Arc::new(ReplayEmbedder::new(config.embedding.model.clone(), book)),
                    chat: Arc::new(move |m: &str| {
                        Ok(Arc::new(ReplayChat::new(m, chat_book.clone())) as Arc<dyn ChatProvider>)
                    }),
                    recorder: None,
                    configured: true,
                })
            }
            ProviderMode::Live => {
                let embed_settings = config.embedding_http(&env)?;
                let chat_settings = config.chat_http(&env)?;
                let embedder = HttpEmbedder::new(config.embedding.model.clone(), embed_settings)
                    .map_err(|e| PipelineError::new(Stage::Config, ErrorClass::Config, e.to_string()))?;
                let recorder = match &config.record_to {
                    Some(path) => {
                        let book = if path.exists() { FixtureBook::load(path)? } else { FixtureBook::new() };
                        Some((Arc::new(book), path.clone()))
                    }
                    None => None,
                };
                let embedder: Arc<dyn EmbeddingProvider> = match &recorder {
                    Some((book, _)) => Arc::new(RecordingEmbedder::new(embedder, book.clone())),
                    None => Arc::new(embedder),
                };
                let book = recorder.as_ref().map(|(b, _)| b.clone());
                let chat = move |m: &str| -> Result<Arc<dyn ChatProvider>, ProviderError> {
                    let http = HttpChat::new(m, chat_settings.clone())?;
                    Ok(match &book {
                        Some(b) => Arc::new(RecordingChat::new(http, b.clone())),
                        None => Arc::new(http),
                    })
                };
                Ok(Providers { embedder, chat: Arc::new(chat), recorder, configured: true })
            }
        }
    }

    /// Providers that fail every call with `reason`.
    pub fn unconfigured(config: &Config, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        let embed_model = config.embedding.model.clone();
        let chat_reason = reason.clone();
        Providers {
            embedder: Arc::new(Unconfigured { model: embed_model, reason }),
            chat: Arc::new(move |m: &str| {
                Ok(Arc::new(Unconfigured { model: m.to_string(), reason: chat_reason.clone() }) as Arc<dyn ChatProvider>)
            }),
            recorder: None,
            configured: false,
        }
    }
}

/// One document to ingest into the knowledge store.
#[derive(Debug, Clone)]
pub struct IngestInput {
    pub name: String,
    pub bytes: Vec<u8>,
    pub format: DocumentFormat,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentStatus {
    pub name: String,
    pub document_id: Option<String>,
    pub chunks: usize,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<PipelineError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Documents ingested successfully.
    pub documents: usize,
    pub failed: usize,
    pub chunks: usize,
    pub items: Vec<DocumentStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub patient_id: String,
    pub document_id: String,
    pub chunks: usize,
    pub context: AnnotatedPatientContext,
    pub trace_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCentricResponse {
    pub answer: String,
    /// Entry ids of evidence the answer relies on; always a subset of the
    /// evidence placed in the context.
    pub citations: Vec<String>,
    pub citations_inferred: bool,
    pub patient_id: String,
    pub query: String,
    pub model_name: String,
    pub trace_id: String,
    /// Wall-clock time of the pipeline; not serialized, so responses stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskOutcome {
    pub response: PatientCentricResponse,
    pub context: AugmentedContext,
    pub probe: String,
    pub compression: Vec<CompressionDecision>,
    pub disclaimer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report_id: String,
    pub report: EvalReport,
    pub table: String,
    pub json_path: PathBuf,
    pub table_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub mode: ProviderMode,
    pub embedding: Reachability,
    pub generation: Reachability,
    pub patient_entries: usize,
    pub knowledge_entries: usize,
}

/// Patient ids double as file names: letters, digits, `-`, `_`, `.`, not
/// starting with a dot, at most 128 characters.
pub fn valid_patient_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}

pub struct Engine {
    config: Config,
    prompts: PromptSet,
    headings: HeadingAliases,
    providers: Providers,
    patient_store: SharedStore,
    knowledge_store: SharedStore,
    clock: Arc<dyn Clock>,
    trace_clock: Option<Arc<dyn Clock>>,
    persist_lock: Mutex<()>,
}

impl Engine {
    /// Engine for `config`, with providers for its mode and secrets from
    /// the process environment.
    pub fn open(config: Config) -> Result<Self, PipelineError> {
        let providers = Providers::from_config(&config, |k| std::env::var(k).ok())?;
        Self::with_providers(config, providers)
    }

    pub fn with_providers(config: Config, providers: Providers) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::load(dir)?,
            None => PromptSet::default(),
        };
        let headings = match &config.headings_file {
            Some(path) => HeadingAliases::load(path)?,
            None => HeadingAliases::default(),
        };
        let load = |kind| -> Result<SharedStore, PipelineError> {
            let path = config.data_dir.join(store_file_name(kind));
            let store = if path.exists() { VectorStore::load(&path).map_err(store_error)? } else { VectorStore::new() };
            Ok(store.shared())
        };
        let clock: Arc<dyn Clock> =
            if config.fixed_clock { Arc::new(FixedClock::epoch()) } else { Arc::new(SystemClock) };
        let trace_clock: Option<Arc<dyn Clock>> =
            if config.trace_timestamps { Some(Arc::new(SystemClock)) } else { None };
        Ok(Engine {
            patient_store: load(StoreKind::Patient)?,
            knowledge_store: load(StoreKind::Knowledge)?,
            prompts,
            headings,
            providers,
            clock,
            trace_clock,
            persist_lock: Mutex::new(()),
            config,
        })
    }

    /// Replaces the clock used for trace timestamps (`None` disables them).
    pub fn set_trace_clock(&mut self, clock: Option<Arc<dyn Clock>>) {
        self.trace_clock = clock;
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn headings(&self) -> &HeadingAliases {
        &self.headings
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn patient_store(&self) -> &SharedStore {
        &self.patient_store
    }

    pub fn knowledge_store(&self) -> &SharedStore {
        &self.knowledge_store
    }

    fn chat(&self, model: &str, stage: Stage) -> Result<Arc<dyn ChatProvider>, PipelineError> {
        self.providers.chat.chat(model).map_err(|e| PipelineError::new(stage, provider_class(&e), e.to_string()))
    }

    fn new_trace(&self, id: String) -> Trace {
        Trace::new(id, self.trace_clock.clone())
    }

    fn write_trace(&self, trace: &Trace) {
        if let Err(e) = trace.write(&self.config.traces_dir()) {
            log::warn!("could not write trace {}: {e}", trace.id());
        }
    }

    fn persist(&self, kind: StoreKind) -> Result<(), PipelineError> {
        let _guard = self.persist_lock.lock();
        let store = match kind {
            StoreKind::Patient => &self.patient_store,
            StoreKind::Knowledge => &self.knowledge_store,
        };
        let bytes = store.read().to_bytes();
        let path = self.config.data_dir.join(store_file_name(kind));
        std::fs::create_dir_all(&self.config.data_dir)
            .map_err(|e| PipelineError::new(Stage::Storage, ErrorClass::Io, e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| PipelineError::new(Stage::Storage, ErrorClass::Io, format!("{}: {e}", path.display())))
    }

    /// Saves recorded provider traffic, when recording is enabled.
    pub fn flush_recordings(&self) -> Result<(), PipelineError> {
        if let Some((book, path)) = &self.providers.recorder {
            book.save(path)?;
        }
        Ok(())
    }

    fn embed_entries(
        &self,
        chunks: Vec<crate::corpus::Chunk>,
        metadata: &Metadata,
    ) -> Result<Vec<NewEntry>, PipelineError> {
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors =
            embed_batch(&texts, self.providers.embedder.as_ref(), self.config.embedding.batch_size).map_err(embedding_error)?;
        Ok(chunks.into_iter().zip(vectors).map(|(c, v)| NewEntry::from_chunk(c, v, metadata.clone())).collect())
    }

    fn ingest_one(&self, doc: Result<Document, CorpusError>, name: &str) -> DocumentStatus {
        let outcome = (|| {
            let doc = doc.map_err(corpus_error)?;
            if doc.source == DocumentSource::PatientTranscript {
                return Err(PipelineError::new(
                    Stage::Ingestion,
                    ErrorClass::Validation,
                    "documents with a patient_id belong in the patient store; add them as patients",
                ));
            }
            let mut metadata = doc.metadata.clone();
            metadata.insert("document_id".into(), doc.id.clone());
            metadata.insert("title".into(), doc.title.clone());
            metadata.insert("source".into(), doc.source.as_str().into());
            let chunks = doc.chunks(&self.config.chunking.knowledge);
            let n = chunks.len();
            let entries = self.embed_entries(chunks, &metadata)?;
            self.knowledge_store
                .write()
                .replace_matching(&MetadataFilter::eq("document_id", doc.id.clone()), entries)
                .map_err(store_error)?;
            Ok((doc.id, n))
        })();
        match outcome {
            Ok((id, chunks)) => DocumentStatus { name: name.to_string(), document_id: Some(id), chunks, ok: true, error: None },
            Err(e) => DocumentStatus { name: name.to_string(), document_id: None, chunks: 0, ok: false, error: Some(e) },
        }
    }

    fn finish_ingest(&self, items: Vec<DocumentStatus>) -> Result<IngestReport, PipelineError> {
        let documents = items.iter().filter(|i| i.ok).count();
        if documents > 0 {
            self.persist(StoreKind::Knowledge)?;
        }
        self.flush_recordings()?;
        Ok(IngestReport {
            documents,
            failed: items.len() - documents,
            chunks: items.iter().map(|i| i.chunks).sum(),
            items,
        })
    }

    /// Chunks, embeds and upserts each document into the knowledge store.
    /// Failures are reported per document; re-ingesting a document id
    /// replaces its earlier chunks.
    pub fn ingest_documents(&self, inputs: Vec<IngestInput>) -> Result<IngestReport, PipelineError> {
        let items = inputs
            .into_iter()
            .map(|i| self.ingest_one(load_document(&i.bytes, i.format, i.metadata), &i.name))
            .collect();
        self.finish_ingest(items)
    }

    /// Ingests every `.txt` and `.md` file directly inside `dir` (sorted by
    /// name), merging `<file>.meta` sidecars.
    pub fn ingest_knowledge_dir(&self, dir: &Path) -> Result<IngestReport, PipelineError> {
        let read = std::fs::read_dir(dir).map_err(|e| {
            PipelineError::new(Stage::Ingestion, ErrorClass::Io, format!("{}: {e}", dir.display()))
        })?;
        let mut paths: Vec<PathBuf> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && DocumentFormat::from_path(p).is_some())
            .collect();
        paths.sort();
        let items = paths
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                self.ingest_one(load_document_file(p, Metadata::new()), &name)
            })
            .collect();
        self.finish_ingest(items)
    }

    /// Annotates a transcript into the three-category context, persists it,
    /// and indexes it in the patient store (replacing any earlier context
    /// for the same patient). Without a `patient_id` in `metadata`, one is
    /// derived from the transcript content.
    pub fn add_patient(
        &self,
        bytes: &[u8],
        format: DocumentFormat,
        mut metadata: Metadata,
    ) -> Result<PatientOutcome, PipelineError> {
        let patient_id = metadata
            .get(PATIENT_ID_KEY)
            .cloned()
            .unwrap_or_else(|| format!("p-{}", short_hash(bytes)));
        if !valid_patient_id(&patient_id) {
            return Err(PipelineError::new(
                Stage::Ingestion,
                ErrorClass::Validation,
                format!("invalid patient id {patient_id:?}: use letters, digits, '-', '_' or '.'"),
            ));
        }
        metadata.insert(PATIENT_ID_KEY.into(), patient_id.clone());
        metadata.entry("id".into()).or_insert_with(|| format!("{patient_id}-transcript"));
        let tid = trace_id(&["add_patient", &patient_id, &short_hash(bytes)]);
        let mut trace = self.new_trace(tid.clone());
        let result = self.add_patient_traced(bytes, format, metadata, &patient_id, &mut trace);
        if let Err(e) = &result {
            trace.record("error", e);
        }
        self.write_trace(&trace);
        self.flush_recordings()?;
        result.map_err(|e| e.with_trace(&tid)).map(|(document_id, chunks, context)| PatientOutcome {
            patient_id,
            document_id,
            chunks,
            context,
            trace_id: tid,
        })
    }

    fn add_patient_traced(
        &self,
        bytes: &[u8],
        format: DocumentFormat,
        metadata: Metadata,
        patient_id: &str,
        trace: &mut Trace,
    ) -> Result<(String, usize, AnnotatedPatientContext), PipelineError> {
        let doc = load_document(bytes, format, metadata).map_err(corpus_error)?;
        trace.record("document", serde_json::json!({ "document_id": doc.id, "chars": doc.body.chars().count() }));

        let documents = self.config.documents_dir();
        std::fs::create_dir_all(&documents)
            .and_then(|_| std::fs::write(documents.join(format!("{patient_id}.transcript.txt")), &doc.body))
            .map_err(|e| PipelineError::new(Stage::Storage, ErrorClass::Io, e.to_string()))?;

        let llm = self.chat(&self.config.generation.model, Stage::Annotation)?;
        let annotator = Annotator {
            llm: llm.as_ref(),
            prompts: &self.prompts,
            headings: &self.headings,
            clock: self.clock.as_ref(),
            max_tokens: self.config.generation.max_output_tokens,
        };
        let context = annotator.annotate_transcript(&doc).map_err(annotation_error)?;
        trace.record("annotation", serde_json::json!({ "model": context.annotation_model, "raw_reply": context.raw_reply }));
        context
            .save(&self.config.contexts_dir(), &self.headings)
            .map_err(|e| PipelineError::new(Stage::Storage, ErrorClass::Io, e.to_string()))?;

        let context_doc_id = format!("{patient_id}.context");
        let chunks = split_text(&context_doc_id, &context.body_text(&self.headings), &self.config.chunking.patient);
        let n = chunks.len();
        let mut entry_meta: Metadata = doc
            .metadata
            .iter()
            .filter(|(k, _)| k.as_str() != "id")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        entry_meta.insert("document_id".into(), context_doc_id.clone());
        entry_meta.insert("source_document_id".into(), doc.id.clone());
        entry_meta.insert("title".into(), "Patient unique context".into());
        let entries = self.embed_entries(chunks, &entry_meta)?;
        let (removed, count) = self
            .patient_store
            .write()
            .replace_matching(&MetadataFilter::eq(PATIENT_ID_KEY, patient_id), entries)
            .map_err(store_error)?;
        trace.record("upsert", serde_json::json!({ "chunks": n, "inserted": count.inserted, "updated": count.updated, "removed": removed }));
        self.persist(StoreKind::Patient)?;
        Ok((doc.id, n, context))
    }

    pub fn has_patient(&self, patient_id: &str) -> bool {
        self.patient_store.read().any_matching(&MetadataFilter::eq(PATIENT_ID_KEY, patient_id))
    }

    /// Distinct patient ids in the patient store, sorted.
    pub fn patients(&self) -> Vec<String> {
        let store = self.patient_store.read();
        let mut ids: Vec<String> = store.entries().iter().filter_map(|e| e.metadata.get(PATIENT_ID_KEY).cloned()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// The stored annotated context for a patient.
    pub fn patient_context(&self, patient_id: &str) -> Result<AnnotatedPatientContext, PipelineError> {
        if !valid_patient_id(patient_id) {
            return Err(PipelineError::new(Stage::PatientRetrieval, ErrorClass::NotFound, format!("unknown patient {patient_id}")));
        }
        AnnotatedPatientContext::open(&self.config.contexts_dir(), patient_id, &self.headings).map_err(|e| match e {
            ContextFileError::Io { .. } => {
                PipelineError::new(Stage::PatientRetrieval, ErrorClass::NotFound, format!("unknown patient {patient_id}"))
            }
            other => PipelineError::new(Stage::Storage, ErrorClass::Config, other.to_string()),
        })
    }

    /// Answers `question` for `patient_id` with the default generation model.
    pub fn ask(&self, patient_id: &str, question: &str) -> Result<AskOutcome, PipelineError> {
        let model = self.config.generation.model.clone();
        self.ask_with_model(patient_id, question, &model)
    }

    /// The full pipeline: patient retrieval, augmented knowledge retrieval,
    /// compression, context assembly and generation, traced under one id.
    pub fn ask_with_model(&self, patient_id: &str, question: &str, model: &str) -> Result<AskOutcome, PipelineError> {
        let tid = trace_id(&["ask", patient_id, question, model]);
        let llm = self.chat(model, Stage::Generation).map_err(|e| e.with_trace(&tid))?;
        let mut trace = self.new_trace(tid.clone());
        trace.record("request", serde_json::json!({ "patient_id": patient_id, "query": question, "model": model }));
        let started = Instant::now();
        let result = self.ask_traced(patient_id, question, llm.as_ref(), &mut trace);
        if let Err(e) = &result {
            trace.record("error", e);
        }
        self.write_trace(&trace);
        self.flush_recordings()?;
        let (context, probe, compression, answer) = result.map_err(|e| e.with_trace(&tid))?;
        Ok(AskOutcome {
            response: PatientCentricResponse {
                answer: answer.answer,
                citations: answer.citations,
                citations_inferred: answer.citations_inferred,
                patient_id: patient_id.to_string(),
                query: question.to_string(),
                model_name: answer.model_name,
                trace_id: tid,
                latency: started.elapsed(),
            },
            context,
            probe,
            compression,
            disclaimer: DISCLAIMER.to_string(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn ask_traced(
        &self,
        patient_id: &str,
        question: &str,
        llm: &dyn ChatProvider,
        trace: &mut Trace,
    ) -> Result<(AugmentedContext, String, Vec<CompressionDecision>, crate::generation::GeneratedAnswer), PipelineError> {
        if question.trim().is_empty() {
            return Err(PipelineError::new(Stage::PatientRetrieval, ErrorClass::Validation, "question is empty"));
        }
        let retriever = Retriever {
            embedder: self.providers.embedder.as_ref(),
            llm,
            prompts: &self.prompts,
            patient_store: &self.patient_store,
            knowledge_store: &self.knowledge_store,
            config: &self.config.retrieval,
        };
        let hits = |ev: &[crate::retrieval::Evidence]| -> Vec<serde_json::Value> {
            ev.iter().map(|e| serde_json::json!({ "entry_id": e.entry_id, "rank": e.rank, "score": e.score })).collect()
        };
        let outcome = retriever.retrieve(question, patient_id).map_err(retrieval_error)?;
        trace.record("patient_retrieval", serde_json::json!({ "query": question, "hits": hits(&outcome.patient) }));
        trace.record("knowledge_retrieval", serde_json::json!({ "probe": outcome.probe, "hits": hits(&outcome.knowledge) }));
        trace.record("compression", &outcome.compression);

        let context = assemble_context(&outcome.patient, &outcome.knowledge, question, &self.prompts)
            .map_err(generation_error)?;
        trace.record(
            "assembly",
            serde_json::json!({ "labels": context.labels, "no_evidence": context.no_evidence, "rendered_chars": context.rendered.chars().count() }),
        );
        let answer = generate_response(&context, llm, &self.config.generation.generation()).map_err(generation_error)?;
        trace.record(
            "generation",
            serde_json::json!({ "model": answer.model_name, "answer": answer.answer, "citations": answer.citations, "citations_inferred": answer.citations_inferred }),
        );
        Ok((context, outcome.probe, outcome.compression, answer))
    }

    /// `n` synthetic questions about a stored patient context.
    pub fn generate_questions(&self, patient_id: &str, n: usize) -> Result<Vec<GeneratedQuestion>, PipelineError> {
        let context = self.patient_context(patient_id)?;
        let llm = self.chat(&self.config.generation.model, Stage::Evaluation)?;
        let out = generate_questions(&context.body_text(&self.headings), n, llm.as_ref(), &self.prompts).map_err(|e| {
            let class = match &e {
                QuestionError::InvalidCount => ErrorClass::Validation,
                QuestionError::Provider(p) => provider_class(p),
                QuestionError::TooFew { .. } => ErrorClass::Provider,
            };
            let raw = match &e {
                QuestionError::TooFew { raw_reply, .. } => Some(raw_reply.clone()),
                _ => None,
            };
            PipelineError { raw_reply: raw, ..PipelineError::new(Stage::Evaluation, class, e.to_string()) }
        });
        self.flush_recordings()?;
        out
    }

    /// Runs every dataset row through the pipeline for each model, scores
    /// the answers, and writes `reports/<id>.json` and `reports/<id>.md`.
    pub fn run_eval(&self, dataset: &[DatasetRow], models: &[String]) -> Result<EvalOutcome, PipelineError> {
        let eval_error = |e: EvalError| {
            let class = match e {
                EvalError::TooManyFailures { .. } => ErrorClass::Provider,
                EvalError::InvalidOptions(_) => ErrorClass::Config,
                _ => ErrorClass::Validation,
            };
            PipelineError::new(Stage::Evaluation, class, e.to_string())
        };
        if models.is_empty() {
            return Err(eval_error(EvalError::NoModels));
        }
        let mut chats: BTreeMap<String, Arc<dyn ChatProvider>> = BTreeMap::new();
        for m in models {
            chats.insert(m.clone(), self.chat(m, Stage::Evaluation)?);
        }
        let judge_model = self.config.evaluation.judge_model.clone().unwrap_or_else(|| self.config.generation.model.clone());
        let judge = self.chat(&judge_model, Stage::Evaluation)?;
        let source = |model: &str, row: &DatasetRow| -> Result<String, String> {
            self.ask_with_model(&row.patient_id, &row.question, chats[model].model_name())
                .map(|o| o.response.answer)
                .map_err(|e| e.to_string())
        };
        let ports = ScoringPorts {
            embedder: self.providers.embedder.as_ref(),
            alt_embedder: None,
            judge: judge.as_ref(),
            prompts: &self.prompts,
        };
        let report = run_eval(dataset, models, &source, ports, &self.config.evaluation.options).map_err(eval_error)?;
        self.flush_recordings()?;

        let mut h = Sha256::new();
        h.update(serde_json::to_vec(dataset).expect("dataset serializes"));
        h.update(models.join("\u{1f}").as_bytes());
        let report_id = format!("eval-{}", &hex::encode(h.finalize())[..12]);
        let table = render_report_table(&report);
        let dir = self.config.reports_dir();
        let json_path = dir.join(format!("{report_id}.json"));
        let table_path = dir.join(format!("{report_id}.md"));
        std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(&json_path, serde_json::to_vec_pretty(&report).expect("report serializes")))
            .and_then(|_| std::fs::write(&table_path, &table))
            .map_err(|e| PipelineError::new(Stage::Storage, ErrorClass::Io, e.to_string()))?;
        Ok(EvalOutcome { report_id, report, table, json_path, table_path })
    }

    pub fn run_eval_file(&self, dataset: &Path, models: &[String]) -> Result<EvalOutcome, PipelineError> {
        let rows = load_dataset(dataset).map_err(sheet_error)?;
        self.run_eval(&rows, models)
    }

    /// Provider reachability and store sizes. Read-only.
    pub fn health(&self) -> Health {
        let embedding = self.providers.embedder.probe();
        let generation = match self.providers.chat.chat(&self.config.generation.model) {
            Ok(c) => c.probe(),
            Err(e) => Reachability::Unreachable(e.to_string()),
        };
        let degraded = !self.providers.configured
            || matches!(embedding, Reachability::Unreachable(_))
            || matches!(generation, Reachability::Unreachable(_));
        Health {
            status: if degraded { "degraded" } else { "ok" }.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: self.config.mode,
            embedding,
            generation,
            patient_entries: self.patient_store.read().len(),
            knowledge_entries: self.knowledge_store.read().len(),
        }
    }
}

/// Fleiss' kappa for a categorical rating sheet (`item_id, rater_id, label`).
pub fn kappa_from_file(path: &Path) -> Result<KappaResult, PipelineError> {
    let matrix = load_ratings(path).map_err(sheet_error)?;
    fleiss_kappa(&matrix).map_err(|e: KappaError| PipelineError::new(Stage::Evaluation, ErrorClass::Validation, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnChat;

    const TRANSCRIPT: &str = "A 34-year-old male presents today after an episode of perioral swelling. \
        He has a history of hypertension. RAST testing was performed. An EpiPen was prescribed.";

    fn engine(dir: &Path) -> Engine {
        let config = Config { data_dir: dir.to_path_buf(), fixed_clock: true, ..Config::default() };
        Engine::open(config).unwrap()
    }

    fn meta(p: &str) -> Metadata {
        [(PATIENT_ID_KEY.to_string(), p.to_string())].into()
    }

    #[test]
    fn mock_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let report = e
            .ingest_documents(vec![IngestInput {
                name: "epipen.txt".into(),
                bytes: b"EpiPen use. Press the orange tip firmly against the outer thigh until it clicks.".to_vec(),
                format: DocumentFormat::PlainText,
                metadata: Metadata::new(),
            }])
            .unwrap();
        assert_eq!((report.documents, report.failed), (1, 0));
        let p = e.add_patient(TRANSCRIPT.as_bytes(), DocumentFormat::PlainText, meta("p1")).unwrap();
        assert!(p.context.sections.medications_and_instructions.contains("EpiPen"));
        assert!(dir.path().join("contexts/p1.context.txt").exists());
        let a = e.ask("p1", "How do I use the prescribed EpiPen?").unwrap();
        let provided = a.context.provided_entry_ids();
        assert!(a.response.citations.iter().all(|c| provided.contains(&c.as_str())));
        assert!(dir.path().join("traces").join(format!("{}.jsonl", a.response.trace_id)).exists());

        // Reopening serves the same answer from the persisted stores.
        let again = engine(dir.path()).ask("p1", "How do I use the prescribed EpiPen?").unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn errors_carry_stage_and_class() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let err = e.ask("nobody", "q?").unwrap_err();
        assert_eq!((err.stage, err.class), (Stage::PatientRetrieval, ErrorClass::NotFound));
        assert!(err.trace_id.is_some());
        let err = e.add_patient(b"", DocumentFormat::PlainText, meta("p1")).unwrap_err();
        assert_eq!(err.class, ErrorClass::Validation);
        let err = e.add_patient(b"x", DocumentFormat::PlainText, meta("../etc")).unwrap_err();
        assert_eq!(err.class, ErrorClass::Validation);
    }

    #[test]
    fn annotation_failure_is_staged() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config { data_dir: dir.path().to_path_buf(), ..Config::default() };
        let providers = Providers {
            embedder: Arc::new(MockEmbedder::new(0, 32).unwrap()),
            chat: Arc::new(|m: &str| Ok(Arc::new(FnChat::failing(m, "forced outage")) as Arc<dyn ChatProvider>)),
            recorder: None,
            configured: true,
        };
        let e = Engine::with_providers(config, providers).unwrap();
        let err = e.add_patient(TRANSCRIPT.as_bytes(), DocumentFormat::PlainText, meta("p1")).unwrap_err();
        assert_eq!((err.stage, err.class), (Stage::Annotation, ErrorClass::Provider));
    }

    #[test]
    fn unconfigured_providers_degrade_health() {
        let dir = tempfile::tempdir().unwrap();
        let config = Config { data_dir: dir.path().to_path_buf(), mode: ProviderMode::Live, ..Config::default() };
        assert!(Providers::from_config(&config, |_| None).is_err());
        let e = Engine::with_providers(config.clone(), Providers::unconfigured(&config, "no API key")).unwrap();
        assert_eq!(e.health().status, "degraded");
        assert_eq!(engine(dir.path()).health().status, "ok");
    }

    #[test]
    fn readding_a_patient_replaces_old_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let long = TRANSCRIPT.repeat(8);
        let first = e.add_patient(long.as_bytes(), DocumentFormat::PlainText, meta("p1")).unwrap();
        let second = e.add_patient(TRANSCRIPT.as_bytes(), DocumentFormat::PlainText, meta("p1")).unwrap();
        assert!(first.chunks > second.chunks);
        let stored = e.patient_store().read().entries().iter().filter(|x| x.metadata[PATIENT_ID_KEY] == "p1").count();
        assert_eq!(stored, second.chunks);
        assert_eq!(e.patients(), vec!["p1"]);
    }
}
