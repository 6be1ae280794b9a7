//! Quantitative evaluation runs (similarity and correctness per model) and
//! qualitative agreement statistics.

pub mod kappa;
pub mod likert;
pub mod metrics;
pub mod questions;
pub mod sheets;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::llm::ChatProvider;
use crate::prompts::PromptSet;
use metrics::{answer_correctness, answer_similarity, ClaimCounts, DEFAULT_CORRECTNESS_WEIGHT};
use sheets::DatasetRow;

/// Produces the answer a model gives to one dataset row.
pub trait AnswerSource: Sync {
    fn answer(&self, model: &str, row: &DatasetRow) -> Result<String, String>;
}

impl<F> AnswerSource for F
where
    F: Fn(&str, &DatasetRow) -> Result<String, String> + Sync,
{
    fn answer(&self, model: &str, row: &DatasetRow) -> Result<String, String> {
        self(model, row)
    }
}

/// Ports used to score answers.
#[derive(Clone, Copy)]
pub struct ScoringPorts<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    /// Embedder for the alternate similarity row; the primary one if unset.
    pub alt_embedder: Option<&'a dyn EmbeddingProvider>,
    pub judge: &'a dyn ChatProvider,
    pub prompts: &'a PromptSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub parallelism: usize,
    pub correctness_weight: f64,
    /// The run fails when a model's failed-row fraction exceeds this.
    pub max_error_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { parallelism: 4, correctness_weight: DEFAULT_CORRECTNESS_WEIGHT, max_error_fraction: 0.5 }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no models to evaluate")]
    NoModels,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid evaluation options: {0}")]
    InvalidOptions(String),
    #[error("model {model}: {failed} of {total} rows failed")]
    TooManyFailures { model: String, failed: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub patient_id: String,
    pub specialty: String,
    pub question: String,
    pub ground_truth_answer: String,
    pub model_name: String,
    pub generated_answer: Option<String>,
    pub similarity_score: Option<f64>,
    pub alt_similarity_score: Option<f64>,
    pub correctness_score: Option<f64>,
    pub claim_counts: Option<ClaimCounts>,
    /// Set when the row failed or one of its metrics could not be computed.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_name: String,
    pub rows: usize,
    pub failed_rows: usize,
    pub mean_similarity: Option<f64>,
    pub mean_alt_similarity: Option<f64>,
    pub mean_correctness: Option<f64>,
    pub excluded_similarity: usize,
    pub excluded_alt_similarity: usize,
    pub excluded_correctness: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correctness_weight: f64,
    /// In declared model order.
    pub models: Vec<ModelSummary>,
    /// Grouped by model in declared order, then dataset order.
    pub records: Vec<EvalRecord>,
}

/// Arithmetic mean of the present values, in row order; `None` if none.
pub fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut count, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

fn score_row(row: &DatasetRow, model: &str, source: &dyn AnswerSource, ports: ScoringPorts<'_>, weight: f64) -> EvalRecord {
    let mut record = EvalRecord {
        question_id: row.question_id.clone(),
        patient_id: row.patient_id.clone(),
        specialty: row.specialty.clone(),
        question: row.question.clone(),
        ground_truth_answer: row.ground_truth.clone(),
        model_name: model.to_string(),
        generated_answer: None,
        similarity_score: None,
        alt_similarity_score: None,
        correctness_score: None,
        claim_counts: None,
        errors: Vec::new(),
    };
    let answer = match source.answer(model, row) {
        Ok(a) => a,
        Err(e) => {
            record.errors.push(format!("answer: {e}"));
            return record;
        }
    };
    match answer_similarity(&answer, &row.ground_truth, ports.embedder) {
        Ok(s) => record.similarity_score = Some(s),
        Err(e) => record.errors.push(format!("similarity: {e}")),
    }
    match answer_similarity(&answer, &row.ground_truth, ports.alt_embedder.unwrap_or(ports.embedder)) {
        Ok(s) => record.alt_similarity_score = Some(s),
        Err(e) => record.errors.push(format!("alt-similarity: {e}")),
    }
    match answer_correctness(&answer, &row.ground_truth, ports.judge, ports.embedder, ports.prompts, weight) {
        Ok(b) => {
            record.correctness_score = Some(b.score);
            record.claim_counts = Some(b.counts);
        }
        Err(e) => record.errors.push(format!("correctness: {e}")),
    }
    record.generated_answer = Some(answer);
    record
}

/// Answers and scores every dataset row for every model. Rows run in
/// parallel up to `options.parallelism`; output order is fixed.
pub fn run_eval(
    dataset: &[DatasetRow],
    models: &[String],
    source: &dyn AnswerSource,
    ports: ScoringPorts<'_>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if models.is_empty() {
        return Err(EvalError::NoModels);
    }
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if options.parallelism == 0 || !(0.0..=1.0).contains(&options.correctness_weight) {
        return Err(EvalError::InvalidOptions("parallelism >= 1 and weight in [0, 1] required".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism)
        .build()
        .map_err(|e| EvalError::InvalidOptions(e.to_string()))?;

    let mut records = Vec::with_capacity(dataset.len() * models.len());
    let mut summaries = Vec::with_capacity(models.len());
    for model in models {
        let rows: Vec<EvalRecord> = pool.install(|| {
            dataset
                .par_iter()
                .map(|row| score_row(row, model, source, ports, options.correctness_weight))
                .collect()
        });
        let failed_rows = rows.iter().filter(|r| !r.errors.is_empty()).count();
        if failed_rows as f64 > options.max_error_fraction * rows.len() as f64 {
            return Err(EvalError::TooManyFailures { model: model.clone(), failed: failed_rows, total: rows.len() });
        }
        let (mean_similarity, excluded_similarity) = mean_of(rows.iter().map(|r| r.similarity_score));
        let (mean_alt_similarity, excluded_alt_similarity) = mean_of(rows.iter().map(|r| r.alt_similarity_score));
        let (mean_correctness, excluded_correctness) = mean_of(rows.iter().map(|r| r.correctness_score));
        summaries.push(ModelSummary {
            model_name: model.clone(),
            rows: rows.len(),
            failed_rows,
            mean_similarity,
            mean_alt_similarity,
            mean_correctness,
            excluded_similarity,
            excluded_alt_similarity,
            excluded_correctness,
        });
        records.extend(rows);
    }
    Ok(EvalReport { correctness_weight: options.correctness_weight, models: summaries, records })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Rendered summary: one row per (framework, model), similarity and
/// correctness columns, with exclusion counts underneath.
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("| Evaluation framework | Model | Average similarity score | Average correctness score |\n");
    out.push_str("|---|---|---|---|\n");
    for m in &report.models {
        out.push_str(&format!(
            "| similarity | {} | {} | {} |\n",
            m.model_name,
            cell(m.mean_similarity),
            cell(m.mean_correctness)
        ));
    }
    for m in &report.models {
        out.push_str(&format!("| alt-similarity | {} | {} | - |\n", m.model_name, cell(m.mean_alt_similarity)));
    }
    out.push_str(&format!("\nCorrectness weight: {}\n", report.correctness_weight));
    for m in &report.models {
        out.push_str(&format!(
            "{}: {} rows, {} failed; excluded similarity {}, alt-similarity {}, correctness {}\n",
            m.model_name, m.rows, m.failed_rows, m.excluded_similarity, m.excluded_alt_similarity, m.excluded_correctness
        ));
    }
    out
}
