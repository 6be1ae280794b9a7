//! Engine configuration: one TOML file plus environment overrides.
//! Secrets are never read from the file; only the name of the environment
//! variable holding an API key is.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ChunkingConfig;
use crate::evaluation::EvalOptions;
use crate::generation::GenerationConfig;
use crate::provider::{HttpSettings, ProviderMode, RetryPolicy};
use crate::retrieval::RetrievalConfig;

pub const DEFAULT_CONFIG_FILE: &str = "carecontext.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("environment variable {0} must hold an API key for live mode")]
    MissingSecret(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub mock_seed: u64,
    pub mock_dimension: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-ada-002".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            batch_size: 100,
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
            mock_seed: 0,
            mock_dimension: 1536,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSection {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ChatSection {
    fn default() -> Self {
        ChatSection {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

impl ChatSection {
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig { temperature: self.temperature, max_output_tokens: self.max_output_tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingSection {
    pub patient: ChunkingConfig,
    pub knowledge: ChunkingConfig,
}

impl Default for ChunkingSection {
    fn default() -> Self {
        ChunkingSection { patient: ChunkingConfig::PATIENT, knowledge: ChunkingConfig::KNOWLEDGE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    #[serde(flatten)]
    pub options: EvalOptions,
    /// Model used for claim extraction and verdicts; the generation model
    /// when unset.
    pub judge_model: Option<String>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { options: EvalOptions::default(), judge_model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    pub cors_allow: Vec<String>,
    pub request_timeout_ms: u64,
    pub max_concurrent_pipelines: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            cors_allow: Vec::new(),
            request_timeout_ms: 120_000,
            max_concurrent_pipelines: 2,
            max_body_bytes: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mode: ProviderMode,
    pub data_dir: PathBuf,
    /// Directory of prompt template overrides; bundled defaults otherwise.
    pub prompts_dir: Option<PathBuf>,
    /// Heading alias file; bundled default otherwise.
    pub headings_file: Option<PathBuf>,
    /// Fixture files served in replay mode.
    pub fixtures: Vec<PathBuf>,
    /// In live mode, record every provider exchange into this fixture file.
    pub record_to: Option<PathBuf>,
    /// Timestamp trace records (wall clock). Off keeps traces byte-stable.
    pub trace_timestamps: bool,
    /// Fixed `created_at` for annotated contexts, for reproducible runs.
    pub fixed_clock: bool,
    pub embedding: EmbeddingSection,
    pub generation: ChatSection,
    pub retrieval: RetrievalConfig,
    pub chunking: ChunkingSection,
    pub evaluation: EvaluationSection,
    pub service: ServiceSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: ProviderMode::Mock,
            data_dir: PathBuf::from("data"),
            prompts_dir: None,
            headings_file: None,
            fixtures: Vec::new(),
            record_to: None,
            trace_timestamps: false,
            fixed_clock: false,
            embedding: EmbeddingSection::default(),
            generation: ChatSection::default(),
            retrieval: RetrievalConfig::default(),
            chunking: ChunkingSection::default(),
            evaluation: EvaluationSection::default(),
            service: ServiceSection::default(),
        }
    }
}

/// Overrides read from the environment (applied after the file).
pub const ENV_MODE: &str = "CARECONTEXT_MODE";
pub const ENV_DATA_DIR: &str = "CARECONTEXT_DATA_DIR";
pub const ENV_BIND: &str = "CARECONTEXT_BIND";
pub const ENV_EMBEDDING_ENDPOINT: &str = "CARECONTEXT_EMBEDDING_ENDPOINT";
pub const ENV_EMBEDDING_MODEL: &str = "CARECONTEXT_EMBEDDING_MODEL";
pub const ENV_CHAT_ENDPOINT: &str = "CARECONTEXT_CHAT_ENDPOINT";
pub const ENV_CHAT_MODEL: &str = "CARECONTEXT_CHAT_MODEL";

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            config.resolve_relative_to(base);
        }
        Ok(config)
    }

    /// `path` if given; otherwise `carecontext.toml` in the working
    /// directory if present; otherwise defaults. Environment overrides
    /// apply in every case.
    pub fn discover(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None if Path::new(DEFAULT_CONFIG_FILE).exists() => Self::load(Path::new(DEFAULT_CONFIG_FILE))?,
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        self.prompts_dir.iter_mut().for_each(fix);
        self.headings_file.iter_mut().for_each(fix);
        self.fixtures.iter_mut().for_each(fix);
        self.record_to.iter_mut().for_each(fix);
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(m) = get(ENV_MODE) {
            self.mode = m.parse().map_err(|message| ConfigError::Invalid { key: ENV_MODE.into(), message })?;
        }
        if let Some(d) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(d);
        }
        if let Some(b) = get(ENV_BIND) {
            self.service.bind = b;
        }
        if let Some(v) = get(ENV_EMBEDDING_ENDPOINT) {
            self.embedding.endpoint = v;
        }
        if let Some(v) = get(ENV_EMBEDDING_MODEL) {
            self.embedding.model = v;
        }
        if let Some(v) = get(ENV_CHAT_ENDPOINT) {
            self.generation.endpoint = v;
        }
        if let Some(v) = get(ENV_CHAT_MODEL) {
            self.generation.model = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: &str| Err(ConfigError::Invalid { key: key.into(), message: message.into() });
        if self.embedding.batch_size == 0 {
            return invalid("embedding.batch_size", "must be at least 1");
        }
        if self.embedding.mock_dimension < 2 {
            return invalid("embedding.mock_dimension", "must be at least 2");
        }
        if !(self.generation.temperature.is_finite() && self.generation.temperature >= 0.0) {
            return invalid("generation.temperature", "must be >= 0");
        }
        if self.service.max_concurrent_pipelines == 0 {
            return invalid("service.max_concurrent_pipelines", "must be at least 1");
        }
        for (key, c) in [("chunking.patient", &self.chunking.patient), ("chunking.knowledge", &self.chunking.knowledge)] {
            if c.validate().is_err() {
                return invalid(key, "need chunk_size > 0 and overlap < chunk_size");
            }
        }
        if self.retrieval.validate().is_err() {
            return invalid("retrieval", "k_patient and k_knowledge must be at least 1");
        }
        let w = self.evaluation.options.correctness_weight;
        if !(0.0..=1.0).contains(&w) {
            return invalid("evaluation.correctness_weight", "must be within [0, 1]");
        }
        if self.evaluation.options.parallelism == 0 {
            return invalid("evaluation.parallelism", "must be at least 1");
        }
        Ok(())
    }

    pub fn embedding_http(&self, get_env: impl Fn(&str) -> Option<String>) -> Result<HttpSettings, ConfigError> {
        let e = &self.embedding;
        Ok(HttpSettings {
            endpoint: e.endpoint.clone(),
            api_key: Some(get_env(&e.api_key_env).ok_or_else(|| ConfigError::MissingSecret(e.api_key_env.clone()))?),
            timeout: Duration::from_millis(e.timeout_ms),
            retry: e.retry,
        })
    }

    pub fn chat_http(&self, get_env: impl Fn(&str) -> Option<String>) -> Result<HttpSettings, ConfigError> {
        let g = &self.generation;
        Ok(HttpSettings {
            endpoint: g.endpoint.clone(),
            api_key: Some(get_env(&g.api_key_env).ok_or_else(|| ConfigError::MissingSecret(g.api_key_env.clone()))?),
            timeout: Duration::from_millis(g.timeout_ms),
            retry: g.retry,
        })
    }

    pub fn contexts_dir(&self) -> PathBuf {
        self.data_dir.join("contexts")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.data_dir.join("traces")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.data_dir.join("reports")
    }

    pub fn documents_dir(&self) -> PathBuf {
        self.data_dir.join("documents")
    }
}
