//! Fixture files for replaying recorded provider traffic offline.
//!
//! A fixture file is newline-delimited JSON, one [`FixtureRecord`] per line,
//! keyed by the SHA-256 of the canonical request JSON (object keys sorted).
//! Records are written sorted by `(kind, key)` so files diff cleanly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Chat,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub kind: FixtureKind,
    pub key: String,
    pub request: serde_json::Value,
    pub response: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed fixture record: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// Hex SHA-256 of the canonical serialization of `request`.
pub fn request_key(request: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key, so this is canonical.
    let canonical = serde_json::to_string(request).expect("json values always serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// In-memory set of fixture records, shared by recorders and replayers.
#[derive(Debug, Default)]
pub struct FixtureBook {
    records: RwLock<BTreeMap<(FixtureKind, String), FixtureRecord>>,
}

impl FixtureBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        Self::load_all(std::slice::from_ref(&path.to_path_buf()))
    }

    /// Loads several fixture files; later files win on duplicate keys.
    pub fn load_all(paths: &[PathBuf]) -> Result<Self, FixtureError> {
        let book = FixtureBook::new();
        for path in paths {
            let text = fs::read_to_string(path)
                .map_err(|source| FixtureError::Io { path: path.clone(), source })?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: FixtureRecord = serde_json::from_str(line).map_err(|e| FixtureError::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                book.insert(record);
            }
        }
        Ok(book)
    }

    pub fn get(&self, kind: FixtureKind, key: &str) -> Option<FixtureRecord> {
        self.records.read().get(&(kind, key.to_string())).cloned()
    }

    pub fn insert(&self, record: FixtureRecord) {
        self.records.write().insert((record.kind, record.key.clone()), record);
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<(), FixtureError> {
        let io = |source| FixtureError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut out = Vec::new();
        for record in self.records.read().values() {
            serde_json::to_writer(&mut out, record).expect("records serialize");
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&out).map_err(io)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_ignores_object_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
        assert_eq!(request_key(&a), request_key(&b));
        assert_ne!(request_key(&a), request_key(&json!({"a":[2,1],"b":1})));
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let book = FixtureBook::new();
        let request = json!({"model":"m","input":"x"});
        book.insert(FixtureRecord {
            kind: FixtureKind::Chat,
            key: request_key(&request),
            request: request.clone(),
            response: json!("hi"),
        });
        book.save(&path).unwrap();
        let again = FixtureBook::load(&path).unwrap();
        assert_eq!(again.get(FixtureKind::Chat, &request_key(&request)).unwrap().response, json!("hi"));
        assert!(again.get(FixtureKind::Embedding, &request_key(&request)).is_none());
    }
}
