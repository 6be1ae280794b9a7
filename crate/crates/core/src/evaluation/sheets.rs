//! Delimiter-separated input files: evaluation datasets, categorical rating
//! sheets and Likert score sheets. `.csv` files are comma-separated;
//! everything else is tab-separated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kappa::{KappaError, RatingMatrix};

#[derive(Debug, Error)]
pub enum SheetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("file has no data rows")]
    Empty,
    #[error(transparent)]
    Kappa(#[from] KappaError),
}

pub fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => b',',
        _ => b'\t',
    }
}

/// Rows keyed by header name, with 1-based file line numbers.
fn read_rows(text: &str, delimiter: u8, required: &[&str]) -> Result<Vec<(u64, BTreeMap<String, String>)>, SheetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SheetError::Row { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    for r in required {
        if !headers.iter().any(|h| h == r) {
            return Err(SheetError::MissingColumn(r.to_string()));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| SheetError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect()));
    }
    if rows.is_empty() {
        return Err(SheetError::Empty);
    }
    Ok(rows)
}

fn read_file(path: &Path) -> Result<String, SheetError> {
    std::fs::read_to_string(path).map_err(|source| SheetError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub question_id: String,
    pub patient_id: String,
    pub specialty: String,
    pub question: String,
    pub ground_truth: String,
}

pub const DATASET_COLUMNS: [&str; 5] = ["question_id", "patient_id", "specialty", "question", "ground_truth"];

pub fn parse_dataset(text: &str, delimiter: u8) -> Result<Vec<DatasetRow>, SheetError> {
    read_rows(text, delimiter, &DATASET_COLUMNS)?
        .into_iter()
        .map(|(line, mut row)| {
            let mut take = |k: &str| row.remove(k).unwrap_or_default();
            let r = DatasetRow {
                question_id: take("question_id"),
                patient_id: take("patient_id"),
                specialty: take("specialty"),
                question: take("question"),
                ground_truth: take("ground_truth"),
            };
            for (name, value) in [("question_id", &r.question_id), ("patient_id", &r.patient_id), ("question", &r.question), ("ground_truth", &r.ground_truth)] {
                if value.is_empty() {
                    return Err(SheetError::Row { line, message: format!("{name} is empty") });
                }
            }
            Ok(r)
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRow>, SheetError> {
    parse_dataset(&read_file(path)?, delimiter_for(path))
}

/// Categorical ratings `item_id, rater_id, label` → count matrix.
pub fn parse_ratings(text: &str, delimiter: u8) -> Result<RatingMatrix, SheetError> {
    let rows = read_rows(text, delimiter, &["item_id", "rater_id", "label"])?;
    let triples: Vec<(String, String, String)> = rows
        .into_iter()
        .map(|(line, r)| {
            let label = r["label"].clone();
            if label.is_empty() {
                return Err(SheetError::Row { line, message: "label is empty".into() });
            }
            Ok((r["item_id"].clone(), r["rater_id"].clone(), label))
        })
        .collect::<Result<_, _>>()?;
    Ok(RatingMatrix::from_labels(triples.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())))?)
}

pub fn load_ratings(path: &Path) -> Result<RatingMatrix, SheetError> {
    parse_ratings(&read_file(path)?, delimiter_for(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertCell {
    pub question_id: String,
    pub rater_id: String,
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
}

/// Likert sheet `question_id, rater_id, score[, specialty]`, scores 1–5.
pub fn parse_likert(text: &str, delimiter: u8) -> Result<Vec<LikertCell>, SheetError> {
    read_rows(text, delimiter, &["question_id", "rater_id", "score"])?
        .into_iter()
        .map(|(line, r)| {
            let raw = &r["score"];
            let score: u8 = raw
                .parse()
                .ok()
                .filter(|s| (1..=5).contains(s))
                .ok_or_else(|| SheetError::Row {
                    line,
                    message: format!(
                        "score {raw:?} for question {} by rater {} is not an integer in 1..=5",
                        r["question_id"], r["rater_id"]
                    ),
                })?;
            Ok(LikertCell {
                question_id: r["question_id"].clone(),
                rater_id: r["rater_id"].clone(),
                score,
                specialty: r.get("specialty").filter(|s| !s.is_empty()).cloned(),
            })
        })
        .collect()
}

pub fn load_likert(path: &Path) -> Result<Vec<LikertCell>, SheetError> {
    parse_likert(&read_file(path)?, delimiter_for(path))
}
