use std::collections::BTreeSet;

use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::provider::ProviderError;
use crate::text;

const SLOTS_PER_FEATURE: u64 = 4;
const UNIGRAM_WEIGHT: f64 = 1.0;
const BIGRAM_WEIGHT: f64 = 0.5;
const WHOLE_TEXT_WEIGHT: f64 = 0.25;

/// Deterministic, unit-norm feature-hashing embedding.
///
/// The function is stable across releases:
///
/// 1. Tokenize into lowercased alphanumeric runs; drop stopwords.
/// 2. Features are every distinct remaining token (weight 1.0), every
///    distinct adjacent token pair joined by a space (weight 0.5), and the
///    whole input text verbatim (weight 0.25). Features are binary: a word
///    repeated ten times counts once, so long documents are not dragged
///    toward their most repeated words. The whole-text feature separates
///    texts whose word sets coincide.
/// 3. For each feature, `h = fnv1a64(seed_le_bytes ++ 0x1f ++ feature)`. For
///    `j` in `0..4`, `r = splitmix64(h + j)`; the feature adds `±weight` at
///    index `r % dimension`, negative when the top bit of `r` is set.
/// 4. Divide by the L2 norm. If the sum cancels to zero, the result is the
///    basis vector at `fnv1a64(text) % dimension`.
///
/// Texts that share content words therefore have positive cosine similarity,
/// which is what lets offline retrieval behave sensibly.
///
/// # Panics
///
/// Panics if `dimension < 2`.
pub fn mock_embedding(input: &str, seed: u64, dimension: usize) -> EmbeddingVector {
    assert!(dimension >= 2, "mock embedding dimension must be at least 2");
    let dim = dimension as u64;
    let mut values = vec![0.0f64; dimension];

    let words: Vec<String> =
        text::tokens(input).into_iter().filter(|t| !text::is_stopword(t)).collect();
    let mut add = |feature: &str, weight: f64| {
        let h = feature_hash(seed, feature);
        for j in 0..SLOTS_PER_FEATURE {
            let r = splitmix64(h.wrapping_add(j));
            let sign = if r >> 63 == 1 { -1.0 } else { 1.0 };
            values[(r % dim) as usize] += sign * weight;
        }
    };
    let unigrams: BTreeSet<&str> = words.iter().map(String::as_str).collect();
    let bigrams: BTreeSet<String> = words.windows(2).map(|p| format!("{} {}", p[0], p[1])).collect();
    for w in unigrams {
        add(w, UNIGRAM_WEIGHT);
    }
    for pair in &bigrams {
        add(pair, BIGRAM_WEIGHT);
    }
    add(input, WHOLE_TEXT_WEIGHT);

    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        values[(fnv1a64(input.as_bytes()) % dim) as usize] = 1.0;
    } else {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    EmbeddingVector::new(values).expect("mock embedding is finite and non-empty")
}

fn feature_hash(seed: u64, feature: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.push(0x1f);
    bytes.extend_from_slice(feature.as_bytes());
    fnv1a64(&bytes)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless provider backed by [`mock_embedding`].
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    model: String,
    seed: u64,
    dimension: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Result<Self, ProviderError> {
        if dimension < 2 {
            return Err(ProviderError::NotConfigured("mock embedding dimension must be >= 2".into()));
        }
        Ok(MockEmbedder { model: format!("mock-embedding-{dimension}"), seed, dimension })
    }

    /// Reports `model` as the model name, e.g. when recording fixtures
    /// that a replay embedder configured with that name will look up.
    pub fn with_model_name(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        Ok(texts.iter().map(|t| mock_embedding(t, self.seed, self.dimension)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    #[test]
    fn deterministic_and_unit_norm() {
        let a = mock_embedding("perioral swelling after Keflex", 7, 64);
        let b = mock_embedding("perioral swelling after Keflex", 7, 64);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_ne!(a, mock_embedding("perioral swelling after Keflex", 8, 64));
    }

    #[test]
    fn punctuation_only_text_is_still_unit_norm() {
        let v = mock_embedding("?!", 0, 2);
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reordered_words_do_not_collide() {
        let a = mock_embedding("adrenaline pen thigh", 0, 256);
        let b = mock_embedding("thigh pen adrenaline", 0, 256);
        assert!(cosine_similarity(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn shared_words_raise_similarity() {
        let q = mock_embedding("how to use the epipen injector", 0, 256);
        let near = mock_embedding("the epipen injector is pressed against the thigh", 0, 256);
        let far = mock_embedding("diabetic foot care and toenail trimming", 0, 256);
        assert!(cosine_similarity(&q, &near).unwrap() > cosine_similarity(&q, &far).unwrap());
    }

    #[test]
    fn tiny_dimension_rejected_by_provider() {
        assert!(MockEmbedder::new(0, 1).is_err());
    }
}
