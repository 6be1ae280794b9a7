//! Python bindings: an `Engine` class over the Rust engine plus the pure
//! helpers (chunking, kappa, correctness). Results come back as plain
//! dicts/lists with the same shape as the service's JSON.

use std::path::PathBuf;

use carecontext_core::config::Config;
use carecontext_core::corpus::{split_text, ChunkingConfig, DocumentFormat, Metadata, PATIENT_ID_KEY};
use carecontext_core::engine::{self, PipelineError};
use carecontext_core::error::ErrorClass;
use carecontext_core::evaluation::kappa::{fleiss_kappa as kappa, RatingMatrix};
use carecontext_core::evaluation::metrics::{blend_correctness, factual_f1, ClaimCounts, DEFAULT_CORRECTNESS_WEIGHT};
use carecontext_core::provider::ProviderMode;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(carecontext, CareContextError, PyException, "Base class for engine failures.");
create_exception!(carecontext, ConfigError, CareContextError);
create_exception!(carecontext, NotFoundError, CareContextError);
create_exception!(carecontext, ProviderError, CareContextError);
create_exception!(carecontext, ValidationError, CareContextError);

fn to_py_err(e: PipelineError) -> PyErr {
    let msg = e.to_string();
    let err = match e.class {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::NotFound => NotFoundError::new_err(msg),
        ErrorClass::Provider => ProviderError::new_err(msg),
        ErrorClass::Validation => ValidationError::new_err(msg),
        ErrorClass::Io => CareContextError::new_err(msg),
    };
    Python::attach(|py| {
        let value = err.value(py);
        let _ = value.setattr("stage", e.stage.as_str());
        let _ = value.setattr("trace_id", e.trace_id.clone());
    });
    err
}

/// Round-trips through JSON so Python sees ordinary dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// The question-answering engine over one data directory.
#[pyclass(frozen)]
struct Engine {
    inner: engine::Engine,
}

#[pymethods]
impl Engine {
    /// `config` is a TOML file path; `mode` ("mock", "replay", "live") and
    /// `data_dir` override it.
    #[new]
    #[pyo3(signature = (config=None, mode=None, data_dir=None))]
    fn new(config: Option<PathBuf>, mode: Option<&str>, data_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut cfg = Config::discover(config.as_deref()).map_err(|e| ConfigError::new_err(e.to_string()))?;
        if let Some(m) = mode {
            cfg.mode = m.parse::<ProviderMode>().map_err(ConfigError::new_err)?;
        }
        if let Some(d) = data_dir {
            cfg.data_dir = d;
        }
        Ok(Engine { inner: engine::Engine::open(cfg).map_err(to_py_err)? })
    }

    fn ingest_knowledge_dir<'py>(&self, py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.ingest_knowledge_dir(&dir)).map_err(to_py_err)?;
        to_py(py, &r)
    }

    /// Annotates and indexes a transcript given as text.
    #[pyo3(signature = (transcript, patient_id=None, metadata=None, markdown=false))]
    fn add_patient<'py>(
        &self,
        py: Python<'py>,
        transcript: &str,
        patient_id: Option<String>,
        metadata: Option<Metadata>,
        markdown: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut metadata = metadata.unwrap_or_default();
        if let Some(id) = patient_id {
            metadata.insert(PATIENT_ID_KEY.to_string(), id);
        }
        let format = if markdown { DocumentFormat::Markdown } else { DocumentFormat::PlainText };
        let r = py.detach(|| self.inner.add_patient(transcript.as_bytes(), format, metadata)).map_err(to_py_err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (patient_id, question, model=None))]
    fn ask<'py>(&self, py: Python<'py>, patient_id: &str, question: &str, model: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let r = py
            .detach(|| match model {
                Some(m) => self.inner.ask_with_model(patient_id, question, m),
                None => self.inner.ask(patient_id, question),
            })
            .map_err(to_py_err)?;
        to_py(py, &r)
    }

    fn patients(&self) -> Vec<String> {
        self.inner.patients()
    }

    fn patient_context<'py>(&self, py: Python<'py>, patient_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.patient_context(patient_id).map_err(to_py_err)?)
    }

    #[pyo3(signature = (patient_id, n=2))]
    fn generate_questions<'py>(&self, py: Python<'py>, patient_id: &str, n: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.generate_questions(patient_id, n)).map_err(to_py_err)?;
        to_py(py, &r)
    }

    /// Runs an evaluation over a dataset file; returns the report outcome
    /// including the rendered table.
    fn run_eval<'py>(&self, py: Python<'py>, dataset: PathBuf, models: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.run_eval_file(&dataset, &models)).map_err(to_py_err)?;
        to_py(py, &r)
    }

    fn health<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.health())
    }
}

/// Sliding-window chunks of `text` as dicts with character offsets.
#[pyfunction]
#[pyo3(signature = (text, chunk_size=500, overlap=200, document_id="doc"))]
fn chunk_text<'py>(py: Python<'py>, text: &str, chunk_size: usize, overlap: usize, document_id: &str) -> PyResult<Bound<'py, PyAny>> {
    let config = ChunkingConfig::new(chunk_size, overlap).map_err(|e| ValidationError::new_err(e.to_string()))?;
    to_py(py, &split_text(document_id, text, &config))
}

/// Fleiss' kappa over an items × categories count matrix.
#[pyfunction]
fn fleiss_kappa<'py>(py: Python<'py>, counts: Vec<Vec<u64>>) -> PyResult<Bound<'py, PyAny>> {
    let m = RatingMatrix::from_counts(counts).map_err(|e| ValidationError::new_err(e.to_string()))?;
    to_py(py, &kappa(&m).map_err(|e| ValidationError::new_err(e.to_string()))?)
}

#[pyfunction]
fn kappa_from_file<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &engine::kappa_from_file(&path).map_err(to_py_err)?)
}

/// Weighted blend of claim-level F1 and answer similarity.
#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, similarity, weight=DEFAULT_CORRECTNESS_WEIGHT))]
fn correctness(tp: usize, fp: usize, fn_: usize, similarity: f64, weight: f64) -> f64 {
    blend_correctness(factual_f1(ClaimCounts { tp, fp, fn_ }), similarity, weight)
}

#[pymodule]
fn carecontext(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(chunk_text, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_from_file, m)?)?;
    m.add_function(wrap_pyfunction!(correctness, m)?)?;
    m.add("CareContextError", py.get_type::<CareContextError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("NotFoundError", py.get_type::<NotFoundError>())?;
    m.add("ProviderError", py.get_type::<ProviderError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
