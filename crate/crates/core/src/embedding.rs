//! Text embedding providers.

use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::llm::ProviderError;

pub trait Embedder: Send + Sync {
    /// Identifier of the provider and model; indexes remember it.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    /// Returns an L2-normalized vector of length [`Embedder::dimension`].
    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError>;
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        (**self).embed(text)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        (**self).embed(text)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        (**self).embed(text)
    }
}

pub const DEFAULT_HASH_DIM: usize = 256;

/// Deterministic offline embedder: signed feature hashing of lowercase word
/// tokens, optionally with character n-grams, then L2 normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
    char_ngrams: Option<usize>,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_HASH_DIM)
    }
}

fn hash_feature(kind: u8, feature: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u8(kind);
    h.write(feature.as_bytes());
    h.finish()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder {
            dim,
            char_ngrams: None,
        }
    }

    /// Adds character n-grams of each padded token as half-weight features.
    pub fn with_char_ngrams(mut self, n: usize) -> Self {
        assert!(n > 0);
        self.char_ngrams = Some(n);
        self
    }

    fn add(&self, v: &mut [f64], kind: u8, feature: &str, weight: f64) {
        let h = hash_feature(kind, feature);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        match self.char_ngrams {
            Some(n) => format!("hashing-bow-{}+c{}", self.dim, n),
            None => format!("hashing-bow-{}", self.dim),
        }
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::fatal("hashing", "cannot embed empty text"));
        }
        let mut v = vec![0.0f64; self.dim];
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            // punctuation-only input still gets a well-defined direction
            tokens.push(text.trim().to_string());
        }
        for tok in &tokens {
            self.add(&mut v, 0, tok, 1.0);
            if let Some(n) = self.char_ngrams {
                let padded: Vec<char> = format!("#{tok}#").chars().collect();
                for gram in padded.windows(n.min(padded.len())) {
                    let g: String = gram.iter().collect();
                    self.add(&mut v, 1, &g, 0.5);
                }
            }
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every feature cancelled out; fall back to the whole text
            self.add(&mut v, 2, text, 1.0);
            norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity clamped to [-1, 1]; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("patients with CONDITION after DRUG").unwrap();
        let b = e.embed("patients with CONDITION after DRUG").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn punctuation_only_and_empty() {
        let e = HashingEmbedder::default();
        let v = e.embed("?!").unwrap();
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn char_ngrams_relate_inflections() {
        let words = HashingEmbedder::default();
        let grams = HashingEmbedder::default().with_char_ngrams(3);
        let sim_words = cosine(
            &words.embed("hypertension").unwrap(),
            &words.embed("hypertensive disorder").unwrap(),
        );
        let sim_grams = cosine(
            &grams.embed("hypertension").unwrap(),
            &grams.embed("hypertensive disorder").unwrap(),
        );
        assert!(sim_grams > sim_words);
        assert!(sim_grams > 0.3);
        assert_ne!(words.id(), grams.id());
    }
}
