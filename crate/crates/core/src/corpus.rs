//! Document ingestion and sliding-window chunking.
//!
//! Chunk boundaries are measured in characters (Unicode scalar values), not
//! bytes or model tokens. Every [`Chunk`] is an exact substring of its parent
//! document body.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type Metadata = BTreeMap<String, String>;

/// Metadata key that ties a transcript to its patient.
pub const PATIENT_ID_KEY: &str = "patient_id";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input is not valid UTF-8 (first invalid byte at offset {offset})")]
    InvalidEncoding { offset: usize },
    #[error("document body is empty")]
    Empty,
    #[error("invalid chunking config: overlap {overlap} must be smaller than chunk_size {chunk_size}")]
    InvalidChunking { chunk_size: usize, overlap: usize },
    #[error("unsupported document format for {0}")]
    UnsupportedFormat(String),
    #[error("malformed metadata line {line}: {text:?}")]
    MalformedMetadata { line: usize, text: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentSource {
    PatientTranscript,
    MedicalTextbook,
    WebResource,
}

impl DocumentSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentSource::PatientTranscript => "patient_transcript",
            DocumentSource::MedicalTextbook => "medical_textbook",
            DocumentSource::WebResource => "web_resource",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "patient_transcript" => Some(Self::PatientTranscript),
            "medical_textbook" => Some(Self::MedicalTextbook),
            "web_resource" => Some(Self::WebResource),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFormat {
    PlainText,
    Markdown,
}

impl DocumentFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "txt" => Some(Self::PlainText),
            "md" | "markdown" => Some(Self::Markdown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: DocumentSource,
    pub title: String,
    pub body: String,
    pub metadata: Metadata,
}

impl Document {
    /// Patient id for transcripts, `None` otherwise.
    pub fn patient_id(&self) -> Option<&str> {
        self.metadata.get(PATIENT_ID_KEY).map(String::as_str)
    }

    pub fn chunks(&self, config: &ChunkingConfig) -> Vec<Chunk> {
        split_text(&self.id, &self.body, config)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub document_id: String,
    /// Character offset, inclusive.
    pub start_offset: usize,
    /// Character offset, exclusive.
    pub end_offset: usize,
    pub text: String,
    pub sequence: usize,
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.end_offset - self.start_offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl ChunkingConfig {
    /// Patient transcripts and annotated contexts: 500 characters, 200 overlap.
    pub const PATIENT: ChunkingConfig = ChunkingConfig { chunk_size: 500, overlap: 200 };
    /// Medical knowledge corpus: 2500 characters, 500 overlap.
    pub const KNOWLEDGE: ChunkingConfig = ChunkingConfig { chunk_size: 2500, overlap: 500 };

    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, CorpusError> {
        let config = ChunkingConfig { chunk_size, overlap };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.chunk_size == 0 || self.overlap >= self.chunk_size {
            return Err(CorpusError::InvalidChunking {
                chunk_size: self.chunk_size,
                overlap: self.overlap,
            });
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

/// Splits `body` into overlapping windows of at most `chunk_size` characters.
///
/// Windows start at `0, s, 2s, ...` with `s = chunk_size - overlap`. The last
/// window is anchored to the end of the body, so it always spans a full
/// `chunk_size` (when the body is at least that long) and may overlap its
/// predecessor by more than `overlap`.
///
/// # Panics
///
/// Panics if `config` is invalid; use [`ChunkingConfig::new`] to build one.
pub fn split_text(document_id: &str, body: &str, config: &ChunkingConfig) -> Vec<Chunk> {
    config.validate().expect("chunking config must satisfy overlap < chunk_size");

    // byte position of every char boundary, including the end of the string
    let bounds: Vec<usize> = body
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(body.len()))
        .collect();
    let total = bounds.len() - 1;
    if total == 0 {
        return Vec::new();
    }

    let size = config.chunk_size;
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        if start + size >= total {
            spans.push((start, total));
            break;
        }
        spans.push((start, start + size));
        let next = start + config.stride();
        if next + size >= total {
            spans.push((total - size, total));
            break;
        }
        start = next;
    }

    spans
        .into_iter()
        .enumerate()
        .map(|(sequence, (start, end))| Chunk {
            document_id: document_id.to_string(),
            start_offset: start,
            end_offset: end,
            text: body[bounds[start]..bounds[end]].to_string(),
            sequence,
        })
        .collect()
}

/// Decodes and normalizes a document.
///
/// Recognized metadata keys: `id`, `title`, `source`, and `patient_id`. A
/// document carrying `patient_id` is a patient transcript; otherwise `source`
/// selects the kind, defaulting to `medical_textbook`.
pub fn load_document(
    bytes: &[u8],
    format: DocumentFormat,
    mut metadata: Metadata,
) -> Result<Document, CorpusError> {
    if bytes.is_empty() {
        return Err(CorpusError::Empty);
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::InvalidEncoding { offset: e.valid_up_to() })?;
    let body = normalize_line_endings(text);
    if body.trim().is_empty() {
        return Err(CorpusError::Empty);
    }

    let source = if metadata.contains_key(PATIENT_ID_KEY) {
        DocumentSource::PatientTranscript
    } else {
        metadata
            .get("source")
            .and_then(|s| DocumentSource::parse(s))
            .unwrap_or(DocumentSource::MedicalTextbook)
    };

    let id = metadata.remove("id").unwrap_or_else(|| {
        let digest = Sha256::digest(body.as_bytes());
        format!("doc-{}", &hex::encode(digest)[..12])
    });
    let title = metadata.remove("title").unwrap_or_else(|| derive_title(&body, format));

    Ok(Document { id, source, title, body, metadata })
}

/// Loads a `.txt`/`.md` file plus its optional `<file>.meta` sidecar.
///
/// Explicit `metadata` entries override sidecar values. When no id is given
/// the file stem is used.
pub fn load_document_file(path: &Path, metadata: Metadata) -> Result<Document, CorpusError> {
    let format = DocumentFormat::from_path(path)
        .ok_or_else(|| CorpusError::UnsupportedFormat(path.display().to_string()))?;
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut merged = Metadata::new();
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|source| CorpusError::Io {
            path: sidecar.display().to_string(),
            source,
        })?;
        merged.extend(parse_metadata_lines(&text)?);
    }
    merged.extend(metadata);
    if !merged.contains_key("id") {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            merged.insert("id".into(), stem.to_string());
        }
    }
    load_document(&bytes, format, merged)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    name.into()
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_metadata_lines(text: &str) -> Result<Metadata, CorpusError> {
    let mut out = Metadata::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.extend([parse_metadata_pair(line)
            .ok_or_else(|| CorpusError::MalformedMetadata { line: i + 1, text: line.to_string() })?]);
    }
    Ok(out)
}

pub fn parse_metadata_pair(pair: &str) -> Option<(String, String)> {
    let (k, v) = pair.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

fn normalize_line_endings(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

fn derive_title(body: &str, format: DocumentFormat) -> String {
    let first = body.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let title = match format {
        DocumentFormat::Markdown => first.trim_start_matches('#').trim(),
        DocumentFormat::PlainText => first,
    };
    title.chars().take(80).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| (c.start_offset, c.end_offset)).collect()
    }

    #[test]
    fn short_body_is_one_chunk() {
        let body = "x".repeat(300);
        let chunks = split_text("d", &body, &ChunkingConfig::PATIENT);
        assert_eq!(offsets(&chunks), vec![(0, 300)]);
        assert_eq!(chunks[0].text, body);
    }

    #[test]
    fn body_1100_yields_three_windows() {
        let body: String = (0..1100).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let chunks = split_text("d", &body, &ChunkingConfig::PATIENT);
        assert_eq!(offsets(&chunks), vec![(0, 500), (300, 800), (600, 1100)]);
    }

    #[test]
    fn final_window_is_anchored_to_end() {
        let body = "y".repeat(1000);
        let chunks = split_text("d", &body, &ChunkingConfig::PATIENT);
        assert_eq!(offsets(&chunks), vec![(0, 500), (300, 800), (500, 1000)]);
    }

    #[test]
    fn empty_body_has_no_chunks() {
        assert!(split_text("d", "", &ChunkingConfig::KNOWLEDGE).is_empty());
    }

    #[test]
    fn offsets_count_characters_not_bytes() {
        let body = "é".repeat(7);
        let chunks = split_text("d", &body, &ChunkingConfig::new(4, 1).unwrap());
        assert_eq!(offsets(&chunks), vec![(0, 4), (3, 7)]);
        assert_eq!(chunks[1].text, "éééé");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ChunkingConfig::new(10, 10).is_err());
        assert!(ChunkingConfig::new(0, 0).is_err());
        assert!(ChunkingConfig::new(10, 9).is_ok());
    }

    #[test]
    fn crlf_is_normalized() {
        let doc = load_document(b"hello\r\nworld", DocumentFormat::PlainText, Metadata::new()).unwrap();
        assert_eq!(doc.body, "hello\nworld");
        assert_eq!(doc.source, DocumentSource::MedicalTextbook);
    }

    #[test]
    fn transcript_metadata_marks_source() {
        let meta: Metadata = [
            ("patient_id".to_string(), "p1".to_string()),
            ("specialty".to_string(), "Allergy / Immunology".to_string()),
        ]
        .into();
        let body = "A 34-year-old male presents today for an allergy consultation after \
                    an episode of lip swelling.";
        let doc = load_document(body.as_bytes(), DocumentFormat::PlainText, meta).unwrap();
        assert_eq!(doc.source, DocumentSource::PatientTranscript);
        assert_eq!(doc.patient_id(), Some("p1"));
        assert_eq!(doc.metadata["specialty"], "Allergy / Immunology");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            load_document(b"", DocumentFormat::PlainText, Metadata::new()),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn invalid_utf8_names_offset() {
        let err = load_document(b"abc\xffdef", DocumentFormat::PlainText, Metadata::new()).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidEncoding { offset: 3 }));
    }

    #[test]
    fn markdown_title_from_heading() {
        let doc = load_document(b"# Using an adrenaline pen\n\nbody", DocumentFormat::Markdown, Metadata::new())
            .unwrap();
        assert_eq!(doc.title, "Using an adrenaline pen");
    }

    #[test]
    fn metadata_lines_parse() {
        let meta = parse_metadata_lines("# comment\nid = k1\nsource=web_resource\n").unwrap();
        assert_eq!(meta["id"], "k1");
        assert_eq!(meta["source"], "web_resource");
        assert!(parse_metadata_lines("novalue").is_err());
    }
}
