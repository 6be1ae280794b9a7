pub mod annotator;
pub mod clock;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod llm;
pub mod prompts;
pub mod provider;
pub mod replay;
pub mod retrieval;
pub mod text;
pub mod trace;
pub mod vectorstore;
