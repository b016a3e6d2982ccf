//! Mapping placeholder terms to vocabulary concept ids and substituting the
//! ids into SQL.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::embedding::{cosine, Embedder};
use crate::llm::{LlmProvider, LlmRequest, Message, ProviderError};
use crate::placeholder::{
    parse_placeholders, replace_placeholders, surface, Placeholder, PlaceholderError,
};

pub type ConceptId = i64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: ConceptId,
    pub name: String,
    pub domain: Domain,
    pub vocabulary: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl ConceptRecord {
    pub fn new(
        concept_id: ConceptId,
        name: impl Into<String>,
        domain: Domain,
        vocabulary: impl Into<String>,
    ) -> Self {
        ConceptRecord {
            concept_id,
            name: name.into(),
            domain,
            vocabulary: vocabulary.into(),
            synonyms: Vec::new(),
        }
    }

    pub fn with_synonyms<I, S>(mut self, synonyms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.synonyms.extend(synonyms.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot read vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("duplicate concept id {0}")]
    DuplicateId(ConceptId),
    #[error("concept {0} has an empty name")]
    EmptyName(ConceptId),
    #[error("concept id must be positive, got {0}")]
    BadId(ConceptId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Concepts read from a vocabulary export, plus rows skipped because their
/// domain has no placeholder surface form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VocabFile {
    pub concepts: Vec<ConceptRecord>,
    pub skipped_domains: BTreeMap<String, usize>,
}

fn sniff_delimiter(bytes: &[u8]) -> u8 {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or(&[]);
    if first.contains(&b'\t') {
        b'\t'
    } else {
        b','
    }
}

fn read_table(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), VocabError> {
    let shown = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| VocabError::Io {
            path: shown.clone(),
            source,
        })?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&bytes))
        .quoting(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let malformed = |e: csv::Error| VocabError::Malformed {
        path: shown.clone(),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(malformed)?.clone();
    let rows = rdr
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(malformed)?;
    Ok((headers, rows))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, VocabError> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or_else(|| VocabError::Malformed {
            path: path.display().to_string(),
            message: format!("missing column `{name}`"),
        })
}

fn parse_id(raw: &str, path: &Path, line: usize) -> Result<ConceptId, VocabError> {
    raw.trim().parse().map_err(|_| VocabError::Malformed {
        path: path.display().to_string(),
        message: format!("line {line}: bad concept_id `{raw}`"),
    })
}

/// Reads a CONCEPT export (tab- or comma-delimited, with a header naming
/// concept_id, concept_name, domain_id and vocabulary_id) and an optional
/// CONCEPT_SYNONYM companion (concept_id, concept_synonym_name).
pub fn load_vocabulary(
    concepts: impl AsRef<Path>,
    synonyms: Option<&Path>,
) -> Result<VocabFile, VocabError> {
    let path = concepts.as_ref();
    let (headers, rows) = read_table(path)?;
    let c_id = column(&headers, "concept_id", path)?;
    let c_name = column(&headers, "concept_name", path)?;
    let c_domain = column(&headers, "domain_id", path)?;
    let c_vocab = column(&headers, "vocabulary_id", path)?;

    let mut out = VocabFile::default();
    let mut seen = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        let id = parse_id(row.get(c_id).unwrap_or(""), path, line)?;
        let domain_raw = row.get(c_domain).unwrap_or("").trim();
        let Some(domain) = Domain::from_omop_domain_id(domain_raw) else {
            *out.skipped_domains
                .entry(domain_raw.to_string())
                .or_default() += 1;
            continue;
        };
        if seen.insert(id, out.concepts.len()).is_some() {
            return Err(VocabError::DuplicateId(id));
        }
        out.concepts.push(ConceptRecord::new(
            id,
            row.get(c_name).unwrap_or("").trim(),
            domain,
            row.get(c_vocab).unwrap_or("").trim(),
        ));
    }

    if let Some(spath) = synonyms {
        let (headers, rows) = read_table(spath)?;
        let s_id = column(&headers, "concept_id", spath)?;
        let s_name = column(&headers, "concept_synonym_name", spath)?;
        for (i, row) in rows.iter().enumerate() {
            let id = parse_id(row.get(s_id).unwrap_or(""), spath, i + 2)?;
            let name = row.get(s_name).unwrap_or("").trim();
            if let (Some(&at), false) = (seen.get(&id), name.is_empty()) {
                out.concepts[at].synonyms.push(name.to_string());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct IndexedString {
    concept: usize,
    lower: String,
    vector: Vec<f32>,
}

/// Name and synonym embeddings grouped by domain. Immutable once built.
pub struct VocabIndex {
    embedder: Arc<dyn Embedder>,
    concepts: Vec<ConceptRecord>,
    by_domain: BTreeMap<Domain, Vec<IndexedString>>,
}

impl std::fmt::Debug for VocabIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VocabIndex")
            .field("embedder", &self.embedder.id())
            .field("concepts", &self.concepts.len())
            .finish()
    }
}

pub fn build_vocab_index(
    concepts: Vec<ConceptRecord>,
    embedder: Arc<dyn Embedder>,
) -> Result<VocabIndex, VocabError> {
    let mut ids = BTreeSet::new();
    let mut by_domain: BTreeMap<Domain, Vec<IndexedString>> = BTreeMap::new();
    for (i, c) in concepts.iter().enumerate() {
        if c.concept_id <= 0 {
            return Err(VocabError::BadId(c.concept_id));
        }
        if !ids.insert(c.concept_id) {
            return Err(VocabError::DuplicateId(c.concept_id));
        }
        if c.name.trim().is_empty() {
            return Err(VocabError::EmptyName(c.concept_id));
        }
        let mut strings: Vec<&str> = vec![c.name.as_str()];
        strings.extend(
            c.synonyms
                .iter()
                .map(String::as_str)
                .filter(|s| !s.trim().is_empty()),
        );
        for s in strings {
            by_domain.entry(c.domain).or_default().push(IndexedString {
                concept: i,
                lower: s.trim().to_lowercase(),
                vector: embedder.embed(s)?,
            });
        }
    }
    Ok(VocabIndex {
        embedder,
        concepts,
        by_domain,
    })
}

impl VocabIndex {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concept(&self, id: ConceptId) -> Option<&ConceptRecord> {
        self.concepts.iter().find(|c| c.concept_id == id)
    }

    pub fn concepts(&self) -> &[ConceptRecord] {
        &self.concepts
    }

    pub fn embedder_id(&self) -> String {
        self.embedder.id()
    }

    /// Every concept in `domain` scored against `term` (best of name and
    /// synonyms), highest first, ties by ascending id. No floor applied.
    pub fn rank(&self, term: &str, domain: Domain) -> Result<Vec<(ConceptId, f64)>, ProviderError> {
        let Some(strings) = self.by_domain.get(&domain) else {
            return Ok(Vec::new());
        };
        let query = self.embedder.embed(term)?;
        let lower = term.trim().to_lowercase();
        let mut best: BTreeMap<usize, f64> = BTreeMap::new();
        for s in strings {
            let score = if s.lower == lower {
                1.0
            } else {
                cosine(&query, &s.vector)
            };
            let slot = best.entry(s.concept).or_insert(f64::NEG_INFINITY);
            if score > *slot {
                *slot = score;
            }
        }
        let mut ranked: Vec<(ConceptId, f64)> = best
            .into_iter()
            .map(|(i, score)| (self.concepts[i].concept_id, score))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMapping {
    pub term: String,
    pub domain: Domain,
    pub candidates: Vec<(ConceptId, f64)>,
    pub chosen: Vec<ConceptId>,
    pub verified: bool,
}

impl ConceptMapping {
    pub fn placeholder(&self) -> String {
        surface(self.domain, &self.term)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    /// Candidates scoring below this cosine are dropped.
    pub floor: f64,
    pub max_candidates: usize,
}

pub const DEFAULT_FLOOR: f64 = 0.30;

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            floor: DEFAULT_FLOOR,
            max_candidates: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalizeError {
    #[error("no {} concept scores above {floor:.2} for {}", .domain.surface(), surface(*.domain, .term))]
    NoCandidates {
        term: String,
        domain: Domain,
        floor: f64,
    },
    #[error("verifier rejected every candidate for {}", surface(*.domain, .term))]
    Rejected { term: String, domain: Domain },
    #[error("unreadable verifier reply for {}: {reply}", surface(*.domain, .term))]
    BadVerdict {
        term: String,
        domain: Domain,
        reply: String,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

const VERIFY_PROMPT: &str = include_str!("../prompts/verify_concepts.v1.txt");

pub fn verify_request(
    index: &VocabIndex,
    term: &str,
    domain: Domain,
    candidates: &[(ConceptId, f64)],
) -> LlmRequest {
    let mut user = format!(
        "### Verify\nTerm: {term}\nDomain: {}\nCandidates:\n",
        domain.surface()
    );
    for (n, (id, _)) in candidates.iter().enumerate() {
        if let Some(c) = index.concept(*id) {
            let _ = writeln!(
                user,
                "{}. {} [{}] ({})",
                n + 1,
                c.name,
                c.concept_id,
                c.vocabulary
            );
        }
    }
    LlmRequest::new(vec![Message::system(VERIFY_PROMPT), Message::user(user)])
}

/// Reads `keep: 1, 3` / `keep: none` into zero-based candidate positions.
fn parse_verdict(reply: &str, n: usize) -> Option<Vec<usize>> {
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| l.to_ascii_lowercase().starts_with("keep:"))?;
    let rest = line[5..].trim();
    if rest.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut keep = BTreeSet::new();
    for part in rest.split(',') {
        let k: usize = part.trim().parse().ok()?;
        if k == 0 || k > n {
            return None;
        }
        keep.insert(k - 1);
    }
    Some(keep.into_iter().collect())
}

pub fn normalize_term(
    term: &str,
    domain: Domain,
    index: &VocabIndex,
    verifier: Option<&dyn LlmProvider>,
    cfg: &NormalizeConfig,
) -> Result<ConceptMapping, NormalizeError> {
    let mut candidates: Vec<(ConceptId, f64)> = index
        .rank(term, domain)?
        .into_iter()
        .filter(|&(_, s)| s >= cfg.floor)
        .collect();
    candidates.truncate(cfg.max_candidates.max(1));
    if candidates.is_empty() {
        return Err(NormalizeError::NoCandidates {
            term: term.to_string(),
            domain,
            floor: cfg.floor,
        });
    }
    let (chosen, verified) = match verifier {
        None => (vec![candidates[0].0], false),
        Some(llm) => {
            let reply = llm.complete(&verify_request(index, term, domain, &candidates))?;
            let keep = parse_verdict(&reply, candidates.len()).ok_or_else(|| {
                NormalizeError::BadVerdict {
                    term: term.to_string(),
                    domain,
                    reply: reply.chars().take(200).collect(),
                }
            })?;
            if keep.is_empty() {
                return Err(NormalizeError::Rejected {
                    term: term.to_string(),
                    domain,
                });
            }
            (keep.into_iter().map(|i| candidates[i].0).collect(), true)
        }
    };
    Ok(ConceptMapping {
        term: term.to_string(),
        domain,
        candidates,
        chosen,
        verified,
    })
}

/// Normalizes each distinct placeholder once, in first-appearance order.
pub fn normalize_placeholders(
    placeholders: &[Placeholder],
    index: &VocabIndex,
    verifier: Option<&dyn LlmProvider>,
    cfg: &NormalizeConfig,
) -> Vec<Result<ConceptMapping, NormalizeError>> {
    let mut seen = BTreeSet::new();
    placeholders
        .iter()
        .filter(|p| seen.insert(key(p.domain, &p.term)))
        .map(|p| normalize_term(&p.term, p.domain, index, verifier, cfg))
        .collect()
}

fn key(domain: Domain, term: &str) -> (Domain, String) {
    (domain, term.trim().to_lowercase())
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResolveError {
    #[error("unresolved placeholder(s): {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error(transparent)]
    Grammar(#[from] PlaceholderError),
}

/// Replaces each `[domain@term]` with its chosen concept ids, comma separated.
/// Everything outside the placeholders is kept byte for byte.
pub fn resolve_placeholders(
    sql: &str,
    mappings: &[ConceptMapping],
) -> Result<String, ResolveError> {
    let table: HashMap<(Domain, String), &ConceptMapping> = mappings
        .iter()
        .filter(|m| !m.chosen.is_empty())
        .map(|m| (key(m.domain, &m.term), m))
        .collect();
    let mut missing = Vec::new();
    for p in parse_placeholders(sql)? {
        if !table.contains_key(&key(p.domain, &p.term)) && !missing.contains(&p.surface()) {
            missing.push(p.surface());
        }
    }
    if !missing.is_empty() {
        return Err(ResolveError::Unresolved(missing));
    }
    Ok(replace_placeholders(sql, |domain, term| {
        let d: Domain = domain.parse().expect("validated above");
        let m = table[&key(d, term)];
        m.chosen
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }))
}
