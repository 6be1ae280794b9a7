//! Embedding vectors, cosine similarity, and the embedding provider port.

mod http;
mod mock;
mod replay;

pub use http::HttpEmbedder;
pub use mock::{mock_embedding, MockEmbedder};
pub use replay::{embedding_request, RecordingEmbedder, ReplayEmbedder};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{ProviderError, Reachability};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("vector component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("input text {index} is empty")]
    EmptyText { index: usize },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider returned {found} vectors for {expected} inputs")]
    CountMismatch { expected: usize, found: usize },
    #[error("provider returned vectors of mixed dimension ({expected} then {found})")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A finite, non-empty embedding vector. Stored as produced by the provider;
/// normalization happens inside [`cosine_similarity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite { index });
        }
        Ok(EmbeddingVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, VectorError> {
        self.check_dimension(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self, VectorError> {
        EmbeddingVector::new(self.0.iter().map(|v| v * alpha).collect())
    }

    pub fn check_dimension(&self, other: &EmbeddingVector) -> Result<(), VectorError> {
        if self.dimension() != other.dimension() {
            return Err(VectorError::DimensionMismatch {
                expected: self.dimension(),
                found: other.dimension(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = VectorError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(VectorError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embedding port. Implementations must be callable from many threads.
pub trait EmbeddingProvider: Send + Sync {
    fn model_name(&self) -> &str;

    /// One provider call; output order matches `texts`.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;

    fn probe(&self) -> Reachability {
        Reachability::Offline
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }

    fn probe(&self) -> Reachability {
        (**self).probe()
    }
}

/// Embeds `texts` in provider calls of at most `batch_size` inputs each,
/// preserving order and checking that every vector shares one dimension.
pub fn embed_batch(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if batch_size == 0 {
        return Err(EmbeddingError::InvalidBatchSize);
    }
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyText { index });
    }

    let mut out: Vec<EmbeddingVector> = Vec::with_capacity(texts.len());
    for batch in texts.chunks(batch_size) {
        let vectors = provider.embed(batch)?;
        if vectors.len() != batch.len() {
            return Err(EmbeddingError::CountMismatch { expected: batch.len(), found: vectors.len() });
        }
        let expected = out.first().or(vectors.first()).map(EmbeddingVector::dimension);
        if let Some(expected) = expected {
            if let Some(bad) = vectors.iter().find(|v| v.dimension() != expected) {
                return Err(EmbeddingError::DimensionMismatch { expected, found: bad.dimension() });
            }
        }
        out.extend(vectors);
    }
    Ok(out)
}

pub fn embed_one(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbeddingError> {
    let mut v = embed_batch(&[text.to_string()], provider, 1)?;
    Ok(v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&v(&[0.3, -2.0, 5.0]), &v(&[0.3, -2.0, 5.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 8, both norms = 3
        let c = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_domain_errors() {
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(VectorError::ZeroNorm));
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(VectorError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(EmbeddingVector::new(vec![1.0, f64::NAN]), Err(VectorError::NonFinite { index: 1 }));
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }

    struct Counting {
        calls: AtomicUsize,
        dim: usize,
    }

    impl EmbeddingProvider for Counting {
        fn model_name(&self) -> &str {
            "counting"
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(texts.iter().map(|t| mock_embedding(t, 0, self.dim)).collect())
        }
    }

    #[test]
    fn batches_are_partitioned_in_order() {
        let provider = Counting { calls: AtomicUsize::new(0), dim: 8 };
        let texts: Vec<String> = (0..2500).map(|i| format!("text number {i}")).collect();
        let out = embed_batch(&texts, &provider, 100).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 25);
        assert_eq!(out.len(), 2500);
        assert_eq!(out[1234], mock_embedding("text number 1234", 0, 8));
    }

    #[test]
    fn empty_text_rejected() {
        let provider = Counting { calls: AtomicUsize::new(0), dim: 8 };
        let err = embed_batch(&["ok".into(), "  ".into()], &provider, 10).unwrap_err();
        assert!(matches!(err, EmbeddingError::EmptyText { index: 1 }));
    }

    struct Drifting(AtomicUsize);

    impl EmbeddingProvider for Drifting {
        fn model_name(&self) -> &str {
            "drifting"
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
            let dim = 4 + self.0.fetch_add(1, Ordering::SeqCst);
            Ok(texts.iter().map(|t| mock_embedding(t, 0, dim)).collect())
        }
    }

    #[test]
    fn dimension_drift_across_batches_is_protocol_error() {
        let texts: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let err = embed_batch(&texts, &Drifting(AtomicUsize::new(0)), 2).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionMismatch { expected: 4, found: 5 }));
    }
}
