//! Exact top-k cosine search over stored chunk embeddings.
//!
//! The patient-context store and the medical-knowledge store are separate
//! [`VectorStore`] instances. Concurrency follows a reader-writer contract:
//! wrap a store in [`SharedStore`]; searches take the read lock, upserts the
//! write lock, and an upsert batch is validated before anything is applied.
//!
//! On disk a store is newline-delimited JSON. Line 1 is a header
//! `{"format":"carecontext-vectorstore","version":1,"dimension":..,"next_insertion":..,"entries":..}`;
//! each following line is one entry in insertion order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, Metadata};
use crate::embedding::{EmbeddingVector, VectorError};

pub const FORMAT_NAME: &str = "carecontext-vectorstore";
pub const FORMAT_VERSION: u32 = 1;

pub type SharedStore = Arc<RwLock<VectorStore>>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: store holds {expected}-d vectors, got {found} (entry {entry_id})")]
    DimensionMismatch { expected: usize, found: usize, entry_id: String },
    #[error("entry {entry_id} has a zero-norm vector")]
    ZeroVector { entry_id: String },
    #[error("duplicate entry id {0} within one upsert batch")]
    DuplicateInBatch(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Query(#[from] VectorError),
    #[error("unsupported store format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt store file at line {line} (byte offset {offset}): {message}")]
    Corrupt { line: usize, offset: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub entry_id: String,
    pub insertion_index: u64,
    pub chunk: Chunk,
    pub vector: EmbeddingVector,
    pub metadata: Metadata,
}

/// An entry to insert or replace.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub entry_id: String,
    pub chunk: Chunk,
    pub vector: EmbeddingVector,
    pub metadata: Metadata,
}

impl NewEntry {
    /// Entry id derived from the chunk, `<document_id>#<sequence>`.
    pub fn from_chunk(chunk: Chunk, vector: EmbeddingVector, metadata: Metadata) -> Self {
        NewEntry { entry_id: format!("{}#{}", chunk.document_id, chunk.sequence), chunk, vector, metadata }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpsertCount {
    pub inserted: usize,
    pub updated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: String,
    pub score: f64,
    /// 1-based position in the result list.
    pub rank: usize,
    pub chunk: Chunk,
    pub metadata: Metadata,
}

/// Conjunction of `key == value` metadata constraints.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetadataFilter {
    pub equals: Vec<(String, String)>,
}

impl MetadataFilter {
    pub fn eq(key: impl Into<String>, value: impl Into<String>) -> Self {
        MetadataFilter { equals: vec![(key.into(), value.into())] }
    }

    pub fn and(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.equals.push((key.into(), value.into()));
        self
    }

    pub fn matches(&self, metadata: &Metadata) -> bool {
        self.equals.iter().all(|(k, v)| metadata.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    dimension: Option<usize>,
    entries: Vec<StoredEntry>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
    next_insertion: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dimension: Option<usize>,
    next_insertion: u64,
    entries: usize,
}

impl VectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared(self) -> SharedStore {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[StoredEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&StoredEntry> {
        self.index.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn any_matching(&self, filter: &MetadataFilter) -> bool {
        self.entries.iter().any(|e| filter.matches(&e.metadata))
    }

    /// Inserts new ids and replaces existing ones in place (keeping their
    /// insertion index). Either the whole batch applies or nothing does.
    pub fn upsert(&mut self, batch: Vec<NewEntry>) -> Result<UpsertCount, StoreError> {
        self.validate_batch(&batch)?;
        Ok(self.apply_batch(batch))
    }

    /// Replaces the entries matching `filter` with `batch` in one step:
    /// matching entries whose ids are absent from the batch are removed,
    /// the rest are upserted. Returns the number removed.
    pub fn replace_matching(
        &mut self,
        filter: &MetadataFilter,
        batch: Vec<NewEntry>,
    ) -> Result<(usize, UpsertCount), StoreError> {
        self.validate_batch(&batch)?;
        let keep: std::collections::HashSet<&str> = batch.iter().map(|e| e.entry_id.as_str()).collect();
        let before = self.entries.len();
        let mut norms = std::mem::take(&mut self.norms).into_iter();
        let mut kept_norms = Vec::with_capacity(before);
        self.entries.retain(|e| {
            let norm = norms.next().expect("one norm per entry");
            let retain = keep.contains(e.entry_id.as_str()) || !filter.matches(&e.metadata);
            if retain {
                kept_norms.push(norm);
            }
            retain
        });
        self.norms = kept_norms;
        self.index = self.entries.iter().enumerate().map(|(i, e)| (e.entry_id.clone(), i)).collect();
        let removed = before - self.entries.len();
        Ok((removed, self.apply_batch(batch)))
    }

    fn validate_batch(&self, batch: &[NewEntry]) -> Result<(), StoreError> {
        let mut dimension = self.dimension;
        let mut seen = std::collections::HashSet::new();
        for e in batch {
            let d = e.vector.dimension();
            match dimension {
                Some(expected) if expected != d => {
                    return Err(StoreError::DimensionMismatch {
                        expected,
                        found: d,
                        entry_id: e.entry_id.clone(),
                    })
                }
                _ => dimension = Some(d),
            }
            if e.vector.norm() == 0.0 {
                return Err(StoreError::ZeroVector { entry_id: e.entry_id.clone() });
            }
            if !seen.insert(e.entry_id.as_str()) {
                return Err(StoreError::DuplicateInBatch(e.entry_id.clone()));
            }
        }
        Ok(())
    }

    fn apply_batch(&mut self, batch: Vec<NewEntry>) -> UpsertCount {
        if let Some(first) = batch.first() {
            self.dimension = Some(first.vector.dimension());
        }
        let mut count = UpsertCount::default();
        for e in batch {
            let norm = e.vector.norm();
            match self.index.get(&e.entry_id) {
                Some(&i) => {
                    let slot = &mut self.entries[i];
                    slot.chunk = e.chunk;
                    slot.vector = e.vector;
                    slot.metadata = e.metadata;
                    self.norms[i] = norm;
                    count.updated += 1;
                }
                None => {
                    self.index.insert(e.entry_id.clone(), self.entries.len());
                    self.entries.push(StoredEntry {
                        entry_id: e.entry_id,
                        insertion_index: self.next_insertion,
                        chunk: e.chunk,
                        vector: e.vector,
                        metadata: e.metadata,
                    });
                    self.norms.push(norm);
                    self.next_insertion += 1;
                    count.inserted += 1;
                }
            }
        }
        count
    }

    /// Top-`k` entries by cosine similarity, ties broken by lower insertion
    /// index. An empty store (or a filter matching nothing) yields no hits.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&MetadataFilter>,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        let qnorm = query.norm();
        if qnorm == 0.0 {
            return Err(VectorError::ZeroNorm.into());
        }
        if let Some(d) = self.dimension {
            if d != query.dimension() {
                return Err(VectorError::DimensionMismatch { expected: d, found: query.dimension() }.into());
            }
        }

        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| filter.map_or(true, |f| f.matches(&e.metadata)))
            .map(|(i, e)| {
                let dot: f64 = e.vector.values().iter().zip(query.values()).map(|(a, b)| a * b).sum();
                ((dot / (self.norms[i] * qnorm)).clamp(-1.0, 1.0), i)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(self.entries[a.1].insertion_index.cmp(&self.entries[b.1].insertion_index))
        });
        scored.truncate(k);

        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(pos, (score, i))| {
                let e = &self.entries[i];
                SearchHit {
                    entry_id: e.entry_id.clone(),
                    score,
                    rank: pos + 1,
                    chunk: e.chunk.clone(),
                    metadata: e.metadata.clone(),
                }
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            dimension: self.dimension,
            next_insertion: self.next_insertion,
            entries: self.entries.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("entries serialize");
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes).map_err(|e| StoreError::Corrupt {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count(),
            offset: e.valid_up_to(),
            message: "invalid UTF-8".into(),
        })?;

        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').enumerate().map(|(i, raw)| {
            let start = offset;
            offset += raw.len();
            (i + 1, start, raw.trim_end_matches(['\n', '\r']))
        });

        let corrupt = |line, offset, message: String| StoreError::Corrupt { line, offset, message };
        let (line_no, start, first) = lines.next().ok_or_else(|| corrupt(1, 0, "missing header".into()))?;
        let header: serde_json::Value =
            serde_json::from_str(first).map_err(|e| corrupt(line_no, start, e.to_string()))?;
        if header.get("format").and_then(|f| f.as_str()) != Some(FORMAT_NAME) {
            return Err(corrupt(line_no, start, format!("not a {FORMAT_NAME} file")));
        }
        let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let header: Header =
            serde_json::from_value(header).map_err(|e| corrupt(line_no, start, e.to_string()))?;

        let mut store = VectorStore { dimension: header.dimension, ..VectorStore::default() };
        for (line_no, start, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoredEntry =
                serde_json::from_str(line).map_err(|e| corrupt(line_no, start, e.to_string()))?;
            if Some(entry.vector.dimension()) != store.dimension {
                return Err(corrupt(line_no, start, "entry dimension differs from header".into()));
            }
            if store.index.contains_key(&entry.entry_id) {
                return Err(corrupt(line_no, start, format!("duplicate entry id {}", entry.entry_id)));
            }
            store.index.insert(entry.entry_id.clone(), store.entries.len());
            store.norms.push(entry.vector.norm());
            store.entries.push(entry);
        }
        if store.entries.len() != header.entries {
            return Err(corrupt(
                offset_line(text),
                text.len(),
                format!("header announces {} entries, found {}", header.entries, store.entries.len()),
            ));
        }
        store.next_insertion = header.next_insertion;
        Ok(store)
    }

    /// Writes atomically via a temporary sibling file.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn offset_line(text: &str) -> usize {
    text.lines().count()
}

/// `patient_store.v1` / `knowledge_store.v1` under a data directory.
pub fn store_file_name(kind: StoreKind) -> String {
    format!("{}.v{}", kind.stem(), FORMAT_VERSION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Patient,
    Knowledge,
}

impl StoreKind {
    pub fn stem(self) -> &'static str {
        match self {
            StoreKind::Patient => "patient_store",
            StoreKind::Knowledge => "knowledge_store",
        }
    }
}
