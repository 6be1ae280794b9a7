use serde::{Deserialize, Serialize};
use std::fmt;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingestion,
    Annotation,
    Embedding,
    PatientRetrieval,
    KnowledgeRetrieval,
    Compression,
    Assembly,
    Generation,
    Evaluation,
    Storage,
    Config,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingestion => "ingestion",
            Stage::Annotation => "annotation",
            Stage::Embedding => "embedding",
            Stage::PatientRetrieval => "patient_retrieval",
            Stage::KnowledgeRetrieval => "knowledge_retrieval",
            Stage::Compression => "compression",
            Stage::Assembly => "assembly",
            Stage::Generation => "generation",
            Stage::Evaluation => "evaluation",
            Stage::Storage => "storage",
            Stage::Config => "config",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Coarse error category shared by the CLI exit codes and HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Config,
    NotFound,
    Provider,
    Validation,
    Io,
}

impl ErrorClass {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::NotFound => 3,
            ErrorClass::Provider => 4,
            ErrorClass::Validation => 5,
            ErrorClass::Io => 6,
        }
    }
}
