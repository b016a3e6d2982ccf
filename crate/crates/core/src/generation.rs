//! Prompt compilation for the four retrieval strategies, SQL extraction from
//! model replies, and placeholder SQL generation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criteria::{CohortCriteria, CriterionKind};
use crate::embedding::Embedder;
use crate::kb::KbKind;
use crate::llm::{LlmProvider, LlmRequest, Message, ProviderError, SamplingParams};
use crate::placeholder::{parse_placeholders, Placeholder, PlaceholderError};
use crate::retrieval::{IndexedKb, RetrievalConfig, RetrievalError};
use crate::sql_complexity::{parse_any, SqlDialect};

/// Serializes as `ZS`/`RAG_A`/`RAG_C`/`RAG_AC`; deserializes any spelling
/// accepted by `FromStr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String")]
pub enum Strategy {
    #[serde(rename = "ZS")]
    Zs,
    #[serde(rename = "RAG_A")]
    RagA,
    #[serde(rename = "RAG_C")]
    RagC,
    #[serde(rename = "RAG_AC")]
    RagAc,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Zs,
        Strategy::RagA,
        Strategy::RagC,
        Strategy::RagAc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Zs => "ZS",
            Strategy::RagA => "RAG+A",
            Strategy::RagC => "RAG+C",
            Strategy::RagAc => "RAG+A+C",
        }
    }

    /// Criteria-level retrieval from the question KB.
    pub fn uses_ask(self) -> bool {
        matches!(self, Strategy::RagA | Strategy::RagAc)
    }

    /// Cohort-level retrieval from the criteria KB.
    pub fn uses_coho(self) -> bool {
        matches!(self, Strategy::RagC | Strategy::RagAc)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy `{0}` (valid values: zs, rag_a, rag_c, rag_ac)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '+' || c == '-' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "zs" | "zero_shot" => Ok(Strategy::Zs),
            "rag_a" => Ok(Strategy::RagA),
            "rag_c" => Ok(Strategy::RagC),
            "rag_ac" | "rag_a_c" => Ok(Strategy::RagAc),
            _ => Err(UnknownStrategy(s.to_string())),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = UnknownStrategy;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// What the prompt asks the model to write.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptTask {
    /// One query returning the whole cohort with index dates.
    Cohort,
    /// Funnel step 0: the index cohort alone.
    FunnelIndex,
    /// Funnel step for one criterion, run against `index_cohort`.
    FunnelCriterion(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub source: KbKind,
    /// Criterion the exemplar was retrieved for (criteria-level retrieval).
    pub criterion_id: Option<String>,
    pub entry_id: String,
    pub score: f64,
    pub text: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub strategy: Strategy,
    pub task: PromptTask,
    pub messages: Vec<Message>,
    pub exemplars: Vec<Exemplar>,
    /// Exemplars removed to respect the character budget, lowest score first.
    pub dropped: Vec<Exemplar>,
}

impl PromptBundle {
    pub fn exemplar_ids(&self, source: KbKind) -> Vec<&str> {
        self.exemplars
            .iter()
            .filter(|e| e.source == source)
            .map(|e| e.entry_id.as_str())
            .collect()
    }

    pub fn request(&self) -> LlmRequest {
        LlmRequest {
            messages: self.messages.clone(),
            sampling: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub char_budget: usize,
    pub dialect: SqlDialect,
}

pub const DEFAULT_CHAR_BUDGET: usize = 24_000;

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            char_budget: DEFAULT_CHAR_BUDGET,
            dialect: SqlDialect::Sqlite,
        }
    }
}

/// Embedder plus the knowledge bases a strategy may draw from.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub embedder: &'a dyn Embedder,
    pub ask: Option<&'a IndexedKb>,
    pub coho: Option<&'a IndexedKb>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("strategy {strategy} needs the {kind} knowledge base, which is not configured")]
    MissingIndex { strategy: Strategy, kind: KbKind },
    #[error("unknown criterion `{0}`")]
    UnknownCriterion(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("no SQL statement found in model reply: {excerpt}")]
    NoSql { excerpt: String },
    #[error(transparent)]
    Placeholder(#[from] PlaceholderError),
}

const GENERATE_PROMPT: &str = include_str!("../prompts/generate_sql.v1.txt");
const STEP_PROMPT: &str = include_str!("../prompts/funnel_step.v1.txt");

pub fn dialect_name(d: SqlDialect) -> &'static str {
    match d {
        SqlDialect::Snowflake => "Snowflake",
        SqlDialect::Sqlite => "SQLite",
        SqlDialect::Generic => "ANSI",
    }
}

/// Marker line identifying a prompt's task; scripted providers match on it.
pub fn task_marker(task: &PromptTask, criteria: &CohortCriteria) -> String {
    match task {
        PromptTask::Cohort => "### Task: full cohort query".to_string(),
        PromptTask::FunnelIndex => "### Step: index (index date)".to_string(),
        PromptTask::FunnelCriterion(id) => {
            let kind = match criteria.get(id) {
                Some((CriterionKind::Exclusion, _)) => "exclusion",
                _ => "inclusion",
            };
            format!("### Step: {id} ({kind})")
        }
    }
}

fn criteria_level(
    criteria: &CohortCriteria,
    task: &PromptTask,
    retriever: &Retriever<'_>,
    kb: &IndexedKb,
    cfg: &RetrievalConfig,
) -> Result<Vec<Exemplar>, GenerationError> {
    let targets: Vec<(String, String)> = match task {
        PromptTask::Cohort => criteria
            .ordered()
            .map(|(_, c)| (c.id.clone(), c.masked_text()))
            .collect(),
        PromptTask::FunnelIndex => vec![(
            "index".to_string(),
            crate::entity::mask_entities(&criteria.index_date_rule, &criteria.index_entities)
                .unwrap_or_else(|_| criteria.index_date_rule.clone()),
        )],
        PromptTask::FunnelCriterion(id) => {
            let (_, c) = criteria
                .get(id)
                .ok_or_else(|| GenerationError::UnknownCriterion(id.clone()))?;
            vec![(c.id.clone(), c.masked_text())]
        }
    };
    // entry id -> (target position, criterion id, score); an entry shared by
    // several criteria stays with the one it matches best
    let mut best: BTreeMap<String, (usize, String, f64)> = BTreeMap::new();
    for (pos, (cid, query)) in targets.iter().enumerate() {
        for (hit, _) in kb.retrieve(retriever.embedder, query, cfg)? {
            let better = best
                .get(&hit.entry_id)
                .is_none_or(|(_, _, s)| hit.score > *s);
            if better {
                best.insert(hit.entry_id.clone(), (pos, cid.clone(), hit.score));
            }
        }
    }
    let mut picked: Vec<(usize, Exemplar)> = best
        .into_iter()
        .filter_map(|(id, (pos, cid, score))| {
            let e = kb.get(&id)?;
            Some((
                pos,
                Exemplar {
                    source: kb.kind,
                    criterion_id: Some(cid),
                    entry_id: id,
                    score,
                    text: e.natural_text.clone(),
                    sql: e.sql.clone(),
                },
            ))
        })
        .collect();
    picked.sort_by(|(pa, a), (pb, b)| {
        pa.cmp(pb)
            .then_with(|| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.entry_id.cmp(&b.entry_id))
    });
    Ok(picked.into_iter().map(|(_, e)| e).collect())
}

fn cohort_level(
    criteria: &CohortCriteria,
    retriever: &Retriever<'_>,
    kb: &IndexedKb,
    cfg: &RetrievalConfig,
) -> Result<Vec<Exemplar>, GenerationError> {
    Ok(kb
        .retrieve(retriever.embedder, &criteria.to_masked_text(), cfg)?
        .into_iter()
        .map(|(hit, e)| Exemplar {
            source: kb.kind,
            criterion_id: None,
            entry_id: hit.entry_id,
            score: hit.score,
            text: e.natural_text.clone(),
            sql: e.sql.clone(),
        })
        .collect())
}

fn render_user(criteria: &CohortCriteria, task: &PromptTask, exemplars: &[Exemplar]) -> String {
    let mut s = String::new();
    let coho: Vec<&Exemplar> = exemplars
        .iter()
        .filter(|e| e.source == KbKind::Coho)
        .collect();
    let ask: Vec<&Exemplar> = exemplars
        .iter()
        .filter(|e| e.source == KbKind::Ask)
        .collect();
    if !coho.is_empty() {
        let _ = writeln!(s, "### Examples of cohort definitions with their SQL\n");
        for (i, e) in coho.iter().enumerate() {
            let _ = writeln!(
                s,
                "Example {} (similarity {:.3}):\nCriteria:\n{}\nSQL:\n```sql\n{}\n```\n",
                i + 1,
                e.score,
                e.text.trim(),
                e.sql.trim()
            );
        }
    }
    if !ask.is_empty() {
        let _ = writeln!(s, "### Examples of related questions with their SQL\n");
        let mut current: Option<&str> = None;
        let mut n = 0;
        for e in ask {
            let cid = e.criterion_id.as_deref().unwrap_or("");
            if current != Some(cid) {
                current = Some(cid);
                n = 0;
                let label = match criteria.get(cid) {
                    Some((_, c)) => format!("{cid}: {}", c.text),
                    None => format!("{cid}: {}", criteria.index_date_rule),
                };
                let _ = writeln!(s, "For criterion {label}");
            }
            n += 1;
            let _ = writeln!(
                s,
                "Example {n} (similarity {:.3}):\nQuestion: {}\nSQL:\n```sql\n{}\n```\n",
                e.score,
                e.text.trim(),
                e.sql.trim()
            );
        }
    }
    let _ = writeln!(s, "{}", task_marker(task, criteria));
    match task {
        PromptTask::Cohort => {
            let _ = write!(
                s,
                "Write one SQL query that returns the cohort (columns person_id, index_date) for these criteria:\n\n{}",
                criteria.to_structured_text()
            );
        }
        PromptTask::FunnelIndex => {
            let _ = write!(
                s,
                "Write one SQL query that returns every patient's index date (columns person_id, index_date), \
                 ignoring all inclusion and exclusion criteria.\nIndex date: {}\n",
                criteria.index_date_rule
            );
        }
        PromptTask::FunnelCriterion(id) => {
            let text = criteria.get(id).map(|(_, c)| c.text.as_str()).unwrap_or("");
            let _ = write!(
                s,
                "Index date: {}\nCriterion: {}\nWrite one SQL query returning the person_id of every patient in \
                 index_cohort who satisfies this criterion, evaluated relative to index_cohort.index_date. \
                 Do not apply any other criterion.\n",
                criteria.index_date_rule, text
            );
        }
    }
    s
}

/// Builds the prompt for `task` under `strategy`.
pub fn compile_task_prompt(
    criteria: &CohortCriteria,
    strategy: Strategy,
    task: PromptTask,
    retriever: &Retriever<'_>,
    cfg: &RetrievalConfig,
    opts: &PromptOptions,
) -> Result<PromptBundle, GenerationError> {
    if let PromptTask::FunnelCriterion(id) = &task {
        if criteria.get(id).is_none() {
            return Err(GenerationError::UnknownCriterion(id.clone()));
        }
    }
    let mut exemplars = Vec::new();
    if strategy.uses_coho() {
        let kb = retriever.coho.ok_or(GenerationError::MissingIndex {
            strategy,
            kind: KbKind::Coho,
        })?;
        exemplars.extend(cohort_level(criteria, retriever, kb, cfg)?);
    }
    if strategy.uses_ask() {
        let kb = retriever.ask.ok_or(GenerationError::MissingIndex {
            strategy,
            kind: KbKind::Ask,
        })?;
        exemplars.extend(criteria_level(criteria, &task, retriever, kb, cfg)?);
    }

    let mut dropped = Vec::new();
    let mut user = render_user(criteria, &task, &exemplars);
    while user.chars().count() > opts.char_budget && !exemplars.is_empty() {
        let (lowest, _) = exemplars
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| ib.cmp(ia))
            })
            .expect("nonempty");
        dropped.push(exemplars.remove(lowest));
        user = render_user(criteria, &task, &exemplars);
    }

    let template = match task {
        PromptTask::Cohort => GENERATE_PROMPT,
        _ => STEP_PROMPT,
    };
    let system = template.replace("{dialect}", dialect_name(opts.dialect));
    Ok(PromptBundle {
        strategy,
        task,
        messages: vec![Message::system(system), Message::user(user)],
        exemplars,
        dropped,
    })
}

/// Builds the full-cohort prompt.
pub fn compile_prompt(
    criteria: &CohortCriteria,
    strategy: Strategy,
    retriever: &Retriever<'_>,
    cfg: &RetrievalConfig,
    opts: &PromptOptions,
) -> Result<PromptBundle, GenerationError> {
    compile_task_prompt(criteria, strategy, PromptTask::Cohort, retriever, cfg, opts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub sql: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSql {
    pub sql: String,
    pub placeholders: Vec<Placeholder>,
    pub strategy: Strategy,
    #[serde(default)]
    pub attempts: Vec<Attempt>,
}

fn is_word_boundary(text: &str, byte: usize) -> bool {
    text[..byte]
        .chars()
        .next_back()
        .is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
}

fn clean(sql: &str) -> String {
    sql.trim().trim_end_matches(';').trim().to_string()
}

/// Pulls one SQL statement out of a model reply: the first fenced code block
/// if any, otherwise the longest substring starting at `SELECT`/`WITH` that
/// parses.
pub fn extract_sql(reply: &str) -> Option<String> {
    if let Some(start) = reply.find("```") {
        let after = &reply[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        let body = body.find("```").map_or(body, |end| &body[..end]);
        let sql = clean(body);
        if !sql.is_empty() {
            return Some(sql);
        }
    }

    let upper = reply.to_ascii_uppercase();
    let mut starts = Vec::new();
    for kw in ["SELECT", "WITH"] {
        let mut from = 0;
        while let Some(pos) = upper[from..].find(kw) {
            let at = from + pos;
            let end = at + kw.len();
            let after_ok = upper[end..]
                .chars()
                .next()
                .is_none_or(|c| !(c.is_alphanumeric() || c == '_'));
            if is_word_boundary(reply, at) && after_ok {
                starts.push(at);
            }
            from = end;
        }
    }
    starts.sort_unstable();

    let mut best: Option<String> = None;
    for &start in &starts {
        let tail = &reply[start..];
        let mut ends: Vec<usize> = tail
            .char_indices()
            .filter(|&(_, c)| c == ';' || c == '\n')
            .map(|(i, _)| i)
            .collect();
        ends.push(tail.len());
        for &end in ends.iter().rev() {
            let candidate = clean(&tail[..end]);
            if candidate.is_empty() {
                continue;
            }
            if best.as_ref().is_some_and(|b| b.len() >= candidate.len()) {
                break;
            }
            if parse_any(&candidate).is_ok() {
                best = Some(candidate);
                break;
            }
        }
    }
    best
}

/// Sends the bundle to the model and parses the placeholder SQL it returns.
pub fn generate_sql<P: LlmProvider + ?Sized>(
    bundle: &PromptBundle,
    llm: &P,
) -> Result<GeneratedSql, GenerationError> {
    let reply = llm.complete(&bundle.request())?;
    let sql = extract_sql(&reply).ok_or_else(|| GenerationError::NoSql {
        excerpt: reply.chars().take(200).collect(),
    })?;
    let placeholders = parse_placeholders(&sql)?;
    Ok(GeneratedSql {
        sql,
        placeholders,
        strategy: bundle.strategy,
        attempts: Vec::new(),
    })
}
