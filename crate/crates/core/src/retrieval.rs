//! Exact top-k cosine retrieval over knowledge-base embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, l2_norm, Embedder};
use crate::kb::{KbEntry, KbKind};
use crate::llm::ProviderError;

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    #[serde(default)]
    pub exclude_ids: BTreeSet<String>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: DEFAULT_TOP_K,
            exclude_ids: BTreeSet::new(),
        }
    }
}

impl RetrievalConfig {
    pub fn with_k(k: usize) -> Self {
        RetrievalConfig {
            k,
            ..Default::default()
        }
    }

    pub fn excluding(mut self, id: impl Into<String>) -> Self {
        self.exclude_ids.insert(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("top-k must be at least 1")]
    ZeroK,
    #[error("index was built with `{index}` but the query embedder is `{query}`")]
    ProviderMismatch { index: String, query: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("failed to index entries {failed_ids:?}: {message}")]
pub struct IndexError {
    pub failed_ids: Vec<String>,
    pub message: String,
}

/// Immutable (id, vector) index searched by brute-force cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    provider_id: String,
    dimension: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

/// Orders hits by descending score, ties by ascending id.
pub fn rank_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.entry_id.cmp(&b.entry_id))
}

impl VectorIndex {
    /// Stored entry embeddings are reused when their dimension matches the
    /// provider; missing ones are computed from `masked_text`.
    pub fn build<E: Embedder + ?Sized>(
        entries: &[KbEntry],
        embedder: &E,
    ) -> Result<Self, IndexError> {
        let dimension = embedder.dimension();
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut failed = Vec::new();
        let mut last_error = String::new();
        for entry in entries {
            let vector = match &entry.embedding {
                Some(v) if v.len() == dimension => Ok(v.clone()),
                Some(v) => Err(format!(
                    "stored embedding has dimension {} but provider `{}` has {}",
                    v.len(),
                    embedder.id(),
                    dimension
                )),
                None => embedder
                    .embed(entry.retrieval_text())
                    .map_err(|e| e.to_string()),
            };
            match vector {
                Ok(v) => {
                    ids.push(entry.id.clone());
                    vectors.push(v);
                }
                Err(e) => {
                    failed.push(entry.id.clone());
                    last_error = e;
                }
            }
        }
        if !failed.is_empty() {
            return Err(IndexError {
                failed_ids: failed,
                message: last_error,
            });
        }
        Ok(VectorIndex {
            provider_id: embedder.id(),
            dimension,
            ids,
            vectors,
        })
    }

    /// Builds from raw (id, vector) pairs, normalizing each vector.
    pub fn from_vectors(provider_id: impl Into<String>, items: Vec<(String, Vec<f32>)>) -> Self {
        let dimension = items.first().map_or(0, |(_, v)| v.len());
        let (ids, vectors) = items
            .into_iter()
            .map(|(id, v)| {
                let n = l2_norm(&v);
                let v = if n > 0.0 {
                    v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
                } else {
                    v
                };
                (id, v)
            })
            .unzip();
        VectorIndex {
            provider_id: provider_id.into(),
            dimension,
            ids,
            vectors,
        }
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn retrieve<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        query_masked: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if cfg.k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if embedder.id() != self.provider_id {
            return Err(RetrievalError::ProviderMismatch {
                index: self.provider_id.clone(),
                query: embedder.id(),
            });
        }
        let query = embedder.embed(query_masked)?;
        self.retrieve_vector(&query, cfg)
    }

    pub fn retrieve_vector(
        &self,
        query: &[f32],
        cfg: &RetrievalConfig,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if cfg.k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let mut hits: Vec<RetrievalHit> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| !cfg.exclude_ids.contains(*id))
            .map(|(id, v)| RetrievalHit {
                entry_id: id.clone(),
                score: cosine(query, v),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(cfg.k);
        Ok(hits)
    }
}

/// A loaded knowledge base together with its vector index.
#[derive(Debug, Clone)]
pub struct IndexedKb {
    pub kind: KbKind,
    pub entries: Vec<KbEntry>,
    pub index: VectorIndex,
    by_id: HashMap<String, usize>,
}

impl IndexedKb {
    pub fn build<E: Embedder + ?Sized>(
        kind: KbKind,
        entries: Vec<KbEntry>,
        embedder: &E,
    ) -> Result<Self, IndexError> {
        let index = VectorIndex::build(&entries, embedder)?;
        let by_id = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Ok(IndexedKb {
            kind,
            entries,
            index,
            by_id,
        })
    }

    pub fn get(&self, id: &str) -> Option<&KbEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn retrieve<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        query_masked: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<(RetrievalHit, &KbEntry)>, RetrievalError> {
        let hits = self.index.retrieve(embedder, query_masked, cfg)?;
        Ok(hits
            .into_iter()
            .filter_map(|h| {
                let entry = self.get(&h.entry_id)?;
                Some((h, entry))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEmbedder;
    use crate::kb::{KbEntry, KbKind};

    fn entry(id: &str, masked: &str) -> KbEntry {
        KbEntry::new(id, KbKind::Ask, masked, "SELECT 1").with_masked_text(masked)
    }

    #[test]
    fn self_query_ranks_first_and_exclusion_removes_it() {
        let e = HashingEmbedder::default();
        let entries = vec![
            entry("a1", "How many patients with CONDITION took DRUG"),
            entry("a2", "Average age of patients with CONDITION"),
            entry("a3", "Number of MEASUREMENT results above threshold"),
        ];
        let index = VectorIndex::build(&entries, &e).unwrap();
        let hits = index
            .retrieve(
                &e,
                "Average age of patients with CONDITION",
                &RetrievalConfig::default(),
            )
            .unwrap();
        assert_eq!(hits[0].entry_id, "a2");
        assert!((hits[0].score - 1.0).abs() < 1e-6);

        let cfg = RetrievalConfig::default().excluding("a2");
        let hits = index
            .retrieve(&e, "Average age of patients with CONDITION", &cfg)
            .unwrap();
        assert!(hits.iter().all(|h| h.entry_id != "a2"));
    }

    #[test]
    fn hand_computed_ranking_on_three_vectors() {
        // query (1,0); cosines: x=1, y=0, d=1/sqrt(2)
        let index = VectorIndex::from_vectors(
            "fixed",
            vec![
                ("y".into(), vec![0.0, 1.0]),
                ("x".into(), vec![2.0, 0.0]),
                ("d".into(), vec![1.0, 1.0]),
            ],
        );
        let hits = index
            .retrieve_vector(&[1.0, 0.0], &RetrievalConfig::with_k(3))
            .unwrap();
        let order: Vec<_> = hits.iter().map(|h| h.entry_id.as_str()).collect();
        assert_eq!(order, ["x", "d", "y"]);
        assert!((hits[1].score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let index = VectorIndex::from_vectors(
            "fixed",
            vec![("b".into(), vec![1.0, 0.0]), ("a".into(), vec![1.0, 0.0])],
        );
        let hits = index
            .retrieve_vector(&[1.0, 0.0], &RetrievalConfig::with_k(2))
            .unwrap();
        assert_eq!(hits[0].entry_id, "a");
        assert_eq!(hits[1].entry_id, "b");
    }

    #[test]
    fn empty_index_and_zero_k() {
        let e = HashingEmbedder::default();
        let index = VectorIndex::build(&[], &e).unwrap();
        assert!(index
            .retrieve(&e, "anything", &RetrievalConfig::default())
            .unwrap()
            .is_empty());
        assert_eq!(
            index.retrieve(&e, "anything", &RetrievalConfig::with_k(0)),
            Err(RetrievalError::ZeroK)
        );
    }

    #[test]
    fn mismatched_stored_embedding_fails_with_ids() {
        let e = HashingEmbedder::default();
        let mut bad = entry("bad", "text");
        bad.embedding = Some(vec![1.0, 0.0]);
        let err = VectorIndex::build(&[entry("ok", "fine"), bad], &e).unwrap_err();
        assert_eq!(err.failed_ids, vec!["bad".to_string()]);
    }

    #[test]
    fn provider_mismatch_is_reported() {
        let words = HashingEmbedder::default();
        let grams = HashingEmbedder::default().with_char_ngrams(3);
        let index = VectorIndex::build(&[entry("a", "text")], &words).unwrap();
        assert!(matches!(
            index.retrieve(&grams, "text", &RetrievalConfig::default()),
            Err(RetrievalError::ProviderMismatch { .. })
        ));
    }
}
