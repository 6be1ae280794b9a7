//! Per-request audit traces: newline-delimited JSON records, one file per
//! trace id under the trace directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;

/// Stable id derived from the request inputs, so the same request yields
/// the same id (and the same trace file) across runs and restarts.
pub fn trace_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    format!("tr-{}", &hex::encode(h.finalize())[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub seq: usize,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<DateTime<Utc>>,
    pub data: serde_json::Value,
}

/// Accumulates records in memory; written once when the request finishes.
pub struct Trace {
    trace_id: String,
    clock: Option<Arc<dyn Clock>>,
    records: Vec<TraceRecord>,
}

impl Trace {
    /// `clock` set means every record is timestamped; leave it unset for
    /// byte-reproducible traces.
    pub fn new(trace_id: impl Into<String>, clock: Option<Arc<dyn Clock>>) -> Self {
        Trace { trace_id: trace_id.into(), clock, records: Vec::new() }
    }

    pub fn id(&self) -> &str {
        &self.trace_id
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn record(&mut self, event: &str, data: impl Serialize) {
        let data = serde_json::to_value(data).unwrap_or_else(|e| serde_json::json!({ "serialize_error": e.to_string() }));
        self.records.push(TraceRecord {
            trace_id: self.trace_id.clone(),
            seq: self.records.len(),
            event: event.to_string(),
            at: self.clock.as_ref().map(|c| c.now()),
            data,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn path_in(dir: &Path, trace_id: &str) -> PathBuf {
        dir.join(format!("{trace_id}.jsonl"))
    }

    /// Writes `<dir>/<trace_id>.jsonl`, replacing any earlier trace with
    /// the same id.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = Self::path_in(dir, &self.trace_id);
        let tmp = dir.join(format!(".{}.{}.tmp", self.trace_id, std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

pub fn read_trace(path: &Path) -> std::io::Result<Vec<TraceRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
