//! TOML configuration. Relative paths resolve against the config file's
//! directory; secrets are never stored here, only env var names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cohort_core::embedding::DEFAULT_HASH_DIM;
use cohort_core::generation::{Strategy, DEFAULT_CHAR_BUDGET};
use cohort_core::heal::DEFAULT_MAX_ITERATIONS;
use cohort_core::metrics::DEFAULT_WINDOW_DAYS;
use cohort_core::retrieval::DEFAULT_TOP_K;
use cohort_core::sql_complexity::SqlDialect;
use cohort_engine::http::HttpProviderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    /// Replays a JSON transcript.
    Mock {
        transcript: PathBuf,
    },
    Http(HttpProviderConfig),
    /// Only valid for the verifier: keep the top candidate.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_ngrams")]
        char_ngrams: Option<usize>,
    },
    Http(HttpProviderConfig),
}

fn default_dim() -> usize {
    DEFAULT_HASH_DIM
}

fn default_ngrams() -> Option<usize> {
    Some(3)
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashing {
            dim: default_dim(),
            char_ngrams: default_ngrams(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbPaths {
    pub ask: Option<PathBuf>,
    pub coho: Option<PathBuf>,
}

/// Missing `concepts` selects the built-in synthetic vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabPaths {
    pub concepts: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// An existing SQLite file in OMOP layout.
    Sqlite {
        path: PathBuf,
        #[serde(default = "default_dialect")]
        dialect: SqlDialect,
        /// Environment variable holding a credential, checked at startup.
        /// SQLite files need none; kept for parity with server backends.
        #[serde(default)]
        credential_env: Option<String>,
    },
    /// A seeded synthetic database built in memory at startup.
    Synthetic {
        #[serde(default = "default_seed")]
        seed: u64,
        #[serde(default = "default_persons")]
        persons: usize,
    },
}

fn default_dialect() -> SqlDialect {
    SqlDialect::Sqlite
}

fn default_seed() -> u64 {
    42
}

fn default_persons() -> usize {
    1000
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic {
            seed: default_seed(),
            persons: default_persons(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub strategy: Strategy,
    pub k: usize,
    pub max_heal_iterations: u32,
    pub window_days: u32,
    pub char_budget: usize,
    pub funnel: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            strategy: Strategy::RagAc,
            k: DEFAULT_TOP_K,
            max_heal_iterations: DEFAULT_MAX_ITERATIONS,
            window_days: DEFAULT_WINDOW_DAYS,
            char_budget: DEFAULT_CHAR_BUDGET,
            funnel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub jobs_dir: PathBuf,
    pub retention_days: u32,
    pub job_timeout_secs: u64,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            jobs_dir: PathBuf::from("jobs"),
            retention_days: 30,
            job_timeout_secs: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub llm: ProviderConfig,
    /// Concept verifier; absent means "same as `llm`".
    #[serde(default)]
    pub verifier: Option<ProviderConfig>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub kb: KbPaths,
    #[serde(default)]
    pub vocab: VocabPaths,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub service: ServiceSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_provider(base: &Path, p: &mut ProviderConfig) {
    if let ProviderConfig::Mock { transcript } = p {
        rebase(base, transcript);
    }
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&raw, base).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// Parses `raw`, resolving relative paths against `base`.
    pub fn from_toml(raw: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: AppConfig = toml::from_str(raw).map_err(|source| ConfigError::Parse {
            path: "<inline>".into(),
            source,
        })?;
        rebase_provider(base, &mut cfg.llm);
        if let Some(v) = cfg.verifier.as_mut() {
            rebase_provider(base, v);
        }
        for p in [
            cfg.kb.ask.as_mut(),
            cfg.kb.coho.as_mut(),
            cfg.vocab.concepts.as_mut(),
            cfg.vocab.synonyms.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        if let BackendConfig::Sqlite { path, .. } = &mut cfg.backend {
            rebase(base, path);
        }
        rebase(base, &mut cfg.service.jobs_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if matches!(self.llm, ProviderConfig::None) {
            return bad("llm.kind = \"none\" is only allowed for the verifier");
        }
        if self.pipeline.k == 0 {
            return bad("pipeline.k must be at least 1");
        }
        if self.pipeline.char_budget == 0 {
            return bad("pipeline.char_budget must be positive");
        }
        if self.vocab.synonyms.is_some() && self.vocab.concepts.is_none() {
            return bad("vocab.synonyms requires vocab.concepts");
        }
        if let BackendConfig::Synthetic { persons: 0, .. } = self.backend {
            return bad("backend.persons must be at least 1");
        }
        if self.service.job_timeout_secs == 0 {
            return bad("service.job_timeout_secs must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = AppConfig::from_toml(
            "[llm]\nkind = \"mock\"\ntranscript = \"t.json\"\n",
            Path::new("/etc/x"),
        )
        .unwrap();
        assert_eq!(
            cfg.llm,
            ProviderConfig::Mock {
                transcript: PathBuf::from("/etc/x/t.json")
            }
        );
        assert_eq!(cfg.pipeline.k, 5);
        assert_eq!(cfg.pipeline.max_heal_iterations, 3);
        assert_eq!(cfg.pipeline.window_days, 30);
        assert_eq!(cfg.service.retention_days, 30);
        assert_eq!(cfg.service.jobs_dir, PathBuf::from("/etc/x/jobs"));
        assert_eq!(cfg.backend, BackendConfig::default());
    }

    #[test]
    fn full_config_round_trips_paths() {
        let raw = r#"
[llm]
kind = "http"
base_url = "http://localhost:1/v1"
model = "m"
api_key_env = "MY_KEY"

[verifier]
kind = "none"

[kb]
ask = "kb/ask.jsonl"
coho = "/abs/coho.jsonl"

[vocab]
concepts = "vocab/CONCEPT.tsv"

[backend]
kind = "sqlite"
path = "omop.db"
dialect = "snowflake"

[pipeline]
strategy = "RAG_A"
k = 3
max_heal_iterations = 1
window_days = 7
"#;
        let cfg = AppConfig::from_toml(raw, Path::new("/base")).unwrap();
        assert_eq!(cfg.kb.ask, Some(PathBuf::from("/base/kb/ask.jsonl")));
        assert_eq!(cfg.kb.coho, Some(PathBuf::from("/abs/coho.jsonl")));
        assert_eq!(cfg.verifier, Some(ProviderConfig::None));
        assert_eq!(cfg.pipeline.strategy, Strategy::RagA);
        assert_eq!(cfg.pipeline.k, 3);
        match cfg.backend {
            BackendConfig::Sqlite { path, dialect, .. } => {
                assert_eq!(path, PathBuf::from("/base/omop.db"));
                assert_eq!(dialect, SqlDialect::Snowflake);
            }
            other => panic!("{other:?}"),
        }
        match cfg.llm {
            ProviderConfig::Http(h) => assert_eq!(h.api_key_env.as_deref(), Some("MY_KEY")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        let base = Path::new(".");
        assert!(AppConfig::from_toml("[llm]\nkind = \"none\"\n", base).is_err());
        assert!(AppConfig::from_toml(
            "[llm]\nkind = \"mock\"\ntranscript = \"t\"\n[pipeline]\nk = 0\n",
            base
        )
        .is_err());
        assert!(AppConfig::from_toml(
            "[llm]\nkind = \"mock\"\ntranscript = \"t\"\n[pipeline]\nbogus = 1\n",
            base
        )
        .is_err());
        assert!(AppConfig::from_toml("", base).is_err());
    }
}
