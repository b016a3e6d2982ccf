//! Long-lived resources built once from an [`AppConfig`].

use std::sync::Arc;

use cohort_core::backend::SqlExecutor;
use cohort_core::embedding::{Embedder, HashingEmbedder};
use cohort_core::entity::DictionaryDetector;
use cohort_core::generation::PromptOptions;
use cohort_core::heal::HealingConfig;
use cohort_core::kb::{kb_stats, load_kb, KbKind, KbStats};
use cohort_core::llm::{LlmProvider, MockLlm, Transcript};
use cohort_core::normalize::{
    build_vocab_index, load_vocabulary, ConceptRecord, NormalizeConfig, VocabIndex,
};
use cohort_core::retrieval::{IndexedKb, RetrievalConfig};
use cohort_core::sql_complexity::SqlDialect;
use cohort_engine::http::{HttpEmbedder, HttpLlm};
use cohort_engine::pipeline::{PipelineConfig, Resources};
use cohort_engine::sqlite::SqliteBackend;
use cohort_engine::synth::{generate_synthetic_omop, SyntheticDbSpec};
use cohort_engine::vocab::concept_records;

use crate::config::{AppConfig, BackendConfig, EmbeddingConfig, PipelineSettings, ProviderConfig};

#[derive(Debug, thiserror::Error)]
#[error("{what}: {message}")]
pub struct SetupError {
    pub what: String,
    pub message: String,
}

fn setup(what: impl Into<String>) -> impl FnOnce(String) -> SetupError {
    let what = what.into();
    move |message| SetupError { what, message }
}

fn provider(cfg: &ProviderConfig, what: &str) -> Result<Option<Box<dyn LlmProvider>>, SetupError> {
    Ok(match cfg {
        ProviderConfig::Mock { transcript } => {
            let t = Transcript::load(transcript).map_err(|e| setup(what)(e.to_string()))?;
            Some(Box::new(MockLlm::new(t)))
        }
        ProviderConfig::Http(h) => Some(Box::new(
            HttpLlm::new(h.clone()).map_err(|e| setup(what)(e.to_string()))?,
        )),
        ProviderConfig::None => None,
    })
}

pub fn build_embedder(cfg: &EmbeddingConfig) -> Result<Arc<dyn Embedder>, SetupError> {
    Ok(match cfg {
        EmbeddingConfig::Hashing { dim, char_ngrams } => {
            if *dim == 0 || *char_ngrams == Some(0) {
                return Err(setup("embedding")(
                    "dim and char_ngrams must be positive".into(),
                ));
            }
            let mut e = HashingEmbedder::new(*dim);
            if let Some(n) = char_ngrams {
                e = e.with_char_ngrams(*n);
            }
            Arc::new(e)
        }
        EmbeddingConfig::Http(h) => {
            Arc::new(HttpEmbedder::new(h.clone()).map_err(|e| setup("embedding")(e.to_string()))?)
        }
    })
}

pub fn build_backend(cfg: &BackendConfig) -> Result<SqliteBackend, SetupError> {
    match cfg {
        BackendConfig::Sqlite {
            path,
            dialect,
            credential_env,
        } => {
            if let Some(var) = credential_env {
                if std::env::var_os(var).is_none() {
                    return Err(setup("backend")(format!(
                        "environment variable {var} is not set"
                    )));
                }
            }
            Ok(SqliteBackend::open(path)
                .map_err(|e| setup("backend")(e.to_string()))?
                .with_dialect_tag(*dialect))
        }
        BackendConfig::Synthetic { seed, persons } => {
            let spec = SyntheticDbSpec {
                seed: *seed,
                n_persons: *persons,
                ..SyntheticDbSpec::default()
            };
            let (_, backend) =
                generate_synthetic_omop(&spec).map_err(|e| setup("backend")(e.to_string()))?;
            Ok(backend)
        }
    }
}

/// Dictionary tagger over every concept name and synonym in `records`.
pub fn detector_for(records: &[ConceptRecord]) -> DictionaryDetector {
    DictionaryDetector::new(records.iter().flat_map(|r| {
        std::iter::once(r.name.clone())
            .chain(r.synonyms.iter().cloned())
            .map(move |t| (t, r.domain))
    }))
}

pub fn pipeline_config(p: &PipelineSettings, dialect: SqlDialect) -> PipelineConfig {
    PipelineConfig {
        strategy: p.strategy,
        retrieval: RetrievalConfig::with_k(p.k),
        prompt: PromptOptions {
            char_budget: p.char_budget,
            dialect,
        },
        healing: HealingConfig {
            max_iterations: p.max_heal_iterations,
        },
        normalize: NormalizeConfig::default(),
        funnel: p.funnel,
    }
}

pub struct AppContext {
    pub config: AppConfig,
    pub llm: Box<dyn LlmProvider>,
    pub verifier: Option<Box<dyn LlmProvider>>,
    /// True when the verifier is the generation model itself.
    verifier_is_llm: bool,
    pub embedder: Arc<dyn Embedder>,
    pub ask: Option<IndexedKb>,
    pub coho: Option<IndexedKb>,
    pub vocab: VocabIndex,
    pub detector: DictionaryDetector,
    pub backend: SqliteBackend,
}

fn load_indexed(
    path: &std::path::Path,
    kind: KbKind,
    embedder: &dyn Embedder,
) -> Result<IndexedKb, SetupError> {
    let what = format!("{kind} knowledge base {}", path.display());
    let entries = load_kb(path, kind).map_err(|e| setup(what.clone())(e.to_string()))?;
    IndexedKb::build(kind, entries, embedder).map_err(|e| setup(what)(e.to_string()))
}

impl AppContext {
    pub fn build(config: AppConfig) -> Result<Self, SetupError> {
        let llm = provider(&config.llm, "llm")?.expect("validated: llm is not none");
        let (verifier, verifier_is_llm) = match &config.verifier {
            None => (None, true),
            Some(v) => (provider(v, "verifier")?, false),
        };
        let embedder = build_embedder(&config.embedding)?;
        let ask = match &config.kb.ask {
            Some(p) => Some(load_indexed(p, KbKind::Ask, embedder.as_ref())?),
            None => None,
        };
        let coho = match &config.kb.coho {
            Some(p) => Some(load_indexed(p, KbKind::Coho, embedder.as_ref())?),
            None => None,
        };
        let records = match &config.vocab.concepts {
            Some(c) => {
                load_vocabulary(c, config.vocab.synonyms.as_deref())
                    .map_err(|e| setup("vocabulary")(e.to_string()))?
                    .concepts
            }
            None => concept_records(),
        };
        let detector = detector_for(&records);
        let vocab = build_vocab_index(records, embedder.clone())
            .map_err(|e| setup("vocabulary")(e.to_string()))?;
        let backend = build_backend(&config.backend)?;
        Ok(AppContext {
            config,
            llm,
            verifier,
            verifier_is_llm,
            embedder,
            ask,
            coho,
            vocab,
            detector,
            backend,
        })
    }

    pub fn resources(&self) -> Resources<'_> {
        let verifier: Option<&dyn LlmProvider> = if self.verifier_is_llm {
            Some(self.llm.as_ref())
        } else {
            self.verifier.as_deref()
        };
        Resources {
            llm: self.llm.as_ref(),
            embedder: self.embedder.as_ref(),
            ask: self.ask.as_ref(),
            coho: self.coho.as_ref(),
            vocab: &self.vocab,
            verifier,
            detector: Some(&self.detector),
            executor: &self.backend,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        pipeline_config(&self.config.pipeline, self.backend.dialect())
    }

    /// Statistics for each configured KB.
    pub fn kb_stats(&self) -> Vec<(KbKind, Result<KbStats, String>)> {
        [self.ask.as_ref(), self.coho.as_ref()]
            .into_iter()
            .flatten()
            .map(|kb| (kb.kind, kb_stats(&kb.entries).map_err(|e| e.to_string())))
            .collect()
    }
}
