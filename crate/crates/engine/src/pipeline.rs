//! End-to-end orchestration: criteria → prompts → placeholder SQL →
//! concept ids → repaired, executed SQL → cohort and funnel.

use serde::{Deserialize, Serialize};

use cohort_core::backend::{ExecError, ResultShape, RowSet, SqlExecutor};
use cohort_core::cohort::Cohort;
use cohort_core::criteria::{parse_criteria, CohortCriteria, CriteriaError};
use cohort_core::embedding::Embedder;
use cohort_core::entity::EntityDetector;
use cohort_core::funnel::{compute_funnel, funnel_similarity, CriterionCohort, Funnel};
use cohort_core::generation::{
    compile_task_prompt, generate_sql, Attempt, GenerationError, PromptOptions, PromptTask,
    Retriever, Strategy,
};
use cohort_core::heal::{self_heal, HealContext, HealError, HealingConfig};
use cohort_core::llm::{LlmProvider, ProviderError};
use cohort_core::normalize::{
    normalize_placeholders, resolve_placeholders, ConceptMapping, NormalizeConfig, NormalizeError,
    ResolveError, VocabIndex,
};
use cohort_core::placeholder::parse_placeholders;
use cohort_core::retrieval::{IndexedKb, RetrievalConfig};

/// Progress notifications, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Parsing,
    Retrieving,
    Generating,
    Normalizing,
    Healing,
    Executing,
    Funneling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub retrieval: RetrievalConfig,
    pub prompt: PromptOptions,
    pub healing: HealingConfig,
    pub normalize: NormalizeConfig,
    /// Also run one query per criterion and build the attrition funnel.
    pub funnel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strategy: Strategy::RagAc,
            retrieval: RetrievalConfig::default(),
            prompt: PromptOptions::default(),
            healing: HealingConfig::default(),
            normalize: NormalizeConfig::default(),
            funnel: true,
        }
    }
}

/// Everything the pipeline talks to.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub llm: &'a dyn LlmProvider,
    pub embedder: &'a dyn Embedder,
    pub ask: Option<&'a IndexedKb>,
    pub coho: Option<&'a IndexedKb>,
    pub vocab: &'a VocabIndex,
    /// Concept verification model; `None` keeps the top candidate.
    pub verifier: Option<&'a dyn LlmProvider>,
    /// Entity tagger used for retrieval masking.
    pub detector: Option<&'a dyn EntityDetector>,
    pub executor: &'a dyn SqlExecutor,
}

impl<'a> Resources<'a> {
    fn retriever(&self) -> Retriever<'a> {
        Retriever {
            embedder: self.embedder,
            ask: self.ask,
            coho: self.coho,
        }
    }
}

/// The life of one generated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRun {
    /// `cohort`, `index`, or a criterion id.
    pub step_id: String,
    pub exemplar_ids: Vec<String>,
    pub placeholder_sql: String,
    pub mappings: Vec<ConceptMapping>,
    pub final_sql: String,
    pub heal_iterations: u32,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutput {
    pub criteria: CohortCriteria,
    pub strategy: Strategy,
    pub cohort: Cohort,
    pub query: QueryRun,
    pub funnel: Option<Funnel>,
    pub funnel_queries: Vec<QueryRun>,
    /// Agreement between the funnel's final cohort and `cohort`.
    pub funnel_similarity: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error("entity detection failed: {0}")]
    Detection(ProviderError),
    #[error("{step}: {error}")]
    Generation {
        step: String,
        error: GenerationError,
    },
    #[error("{step}: {}", .errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Normalize {
        step: String,
        errors: Vec<NormalizeError>,
        placeholder_sql: String,
    },
    #[error("{step}: {error}")]
    Resolve { step: String, error: ResolveError },
    #[error("{step}: {error}")]
    Heal {
        step: String,
        error: HealError,
        placeholder_sql: String,
    },
    #[error("{step}: {error}")]
    Result { step: String, error: ExecError },
}

impl PipelineError {
    /// True when the failure belongs to the generated SQL rather than to the
    /// environment (backend down, provider unreachable, bad input).
    pub fn is_invalid_sql(&self) -> bool {
        match self {
            PipelineError::Generation { error, .. } => !matches!(
                error,
                GenerationError::Provider(_) | GenerationError::MissingIndex { .. }
            ),
            PipelineError::Normalize { errors, .. } => !errors
                .iter()
                .any(|e| matches!(e, NormalizeError::Provider(_))),
            PipelineError::Heal { error, .. } => matches!(error, HealError::Exhausted { .. }),
            PipelineError::Resolve { .. } | PipelineError::Result { .. } => true,
            _ => false,
        }
    }

    pub fn is_backend_unavailable(&self) -> bool {
        matches!(
            self,
            PipelineError::Heal {
                error: HealError::Backend {
                    error: ExecError::Unavailable { .. },
                    ..
                },
                ..
            }
        )
    }
}

fn step_name(task: &PromptTask) -> String {
    match task {
        PromptTask::Cohort => "cohort".to_string(),
        PromptTask::FunnelIndex => "index".to_string(),
        PromptTask::FunnelCriterion(id) => id.clone(),
    }
}

fn run_query(
    criteria: &CohortCriteria,
    task: PromptTask,
    shape: ResultShape,
    index: Option<&Cohort>,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
    stage: &dyn Fn(Stage),
) -> Result<(QueryRun, RowSet), PipelineError> {
    let step = step_name(&task);
    let gen_err = |error| PipelineError::Generation {
        step: step.clone(),
        error,
    };
    if cfg.strategy != Strategy::Zs {
        stage(Stage::Retrieving);
    }
    let bundle = compile_task_prompt(
        criteria,
        cfg.strategy,
        task,
        &res.retriever(),
        &cfg.retrieval,
        &cfg.prompt,
    )
    .map_err(gen_err)?;
    stage(Stage::Generating);
    let generated = generate_sql(&bundle, res.llm).map_err(gen_err)?;

    stage(Stage::Normalizing);
    let mut mappings = Vec::new();
    let mut failures = Vec::new();
    for r in normalize_placeholders(
        &generated.placeholders,
        res.vocab,
        res.verifier,
        &cfg.normalize,
    ) {
        match r {
            Ok(m) => mappings.push(m),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(PipelineError::Normalize {
            step,
            errors: failures,
            placeholder_sql: generated.sql,
        });
    }
    let executable = resolve_placeholders(&generated.sql, &mappings).map_err(|error| {
        PipelineError::Resolve {
            step: step.clone(),
            error,
        }
    })?;

    // placeholders introduced by a repair are normalized on the fly
    let resolver = |sql: &str| -> Result<String, String> {
        let ps = parse_placeholders(sql).map_err(|e| e.to_string())?;
        let mut ms = Vec::new();
        for r in normalize_placeholders(&ps, res.vocab, res.verifier, &cfg.normalize) {
            ms.push(r.map_err(|e| e.to_string())?);
        }
        resolve_placeholders(sql, &ms).map_err(|e| e.to_string())
    };
    stage(Stage::Healing);
    let ctx = HealContext {
        shape,
        index,
        resolver: Some(&resolver),
    };
    let healed =
        self_heal(&executable, res.executor, res.llm, &cfg.healing, &ctx).map_err(|error| {
            PipelineError::Heal {
                step: step.clone(),
                error,
                placeholder_sql: generated.sql.clone(),
            }
        })?;
    stage(Stage::Executing);
    Ok((
        QueryRun {
            step_id: step,
            exemplar_ids: bundle
                .exemplars
                .iter()
                .map(|e| e.entry_id.clone())
                .collect(),
            placeholder_sql: generated.sql,
            mappings,
            final_sql: healed.sql,
            heal_iterations: healed.iterations,
            attempts: healed.attempts,
        },
        healed.rows,
    ))
}

/// Parses raw criteria text and tags entities for masking.
pub fn prepare_criteria(raw: &str, res: &Resources<'_>) -> Result<CohortCriteria, PipelineError> {
    let mut criteria = parse_criteria(raw, Some(res.llm))?;
    if let Some(detector) = res.detector {
        criteria
            .annotate(detector)
            .map_err(PipelineError::Detection)?;
    }
    Ok(criteria)
}

/// The single-query cohort for `criteria`.
pub fn generate_cohort(
    criteria: &CohortCriteria,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
    stage: &dyn Fn(Stage),
) -> Result<(QueryRun, Cohort), PipelineError> {
    let (run, rows) = run_query(
        criteria,
        PromptTask::Cohort,
        ResultShape::Cohort,
        None,
        res,
        cfg,
        stage,
    )?;
    let cohort = rows.to_cohort().map_err(|error| PipelineError::Result {
        step: run.step_id.clone(),
        error,
    })?;
    Ok((run, cohort))
}

/// One query per step, combined by set operations.
pub fn generate_funnel(
    criteria: &CohortCriteria,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
    stage: &dyn Fn(Stage),
) -> Result<(Funnel, Vec<QueryRun>), PipelineError> {
    let (index_run, rows) = run_query(
        criteria,
        PromptTask::FunnelIndex,
        ResultShape::Cohort,
        None,
        res,
        cfg,
        stage,
    )?;
    let index = rows.to_cohort().map_err(|error| PipelineError::Result {
        step: index_run.step_id.clone(),
        error,
    })?;
    let mut runs = vec![index_run];
    let mut steps = Vec::new();
    for (kind, c) in criteria.ordered() {
        let (run, rows) = run_query(
            criteria,
            PromptTask::FunnelCriterion(c.id.clone()),
            ResultShape::PersonIds,
            Some(&index),
            res,
            cfg,
            stage,
        )?;
        let persons = rows.person_ids().map_err(|error| PipelineError::Result {
            step: run.step_id.clone(),
            error,
        })?;
        let mut cc = CriterionCohort::new(c.id.clone(), kind, persons);
        cc.sql = run.final_sql.clone();
        steps.push(cc);
        runs.push(run);
    }
    stage(Stage::Funneling);
    Ok((compute_funnel(&index, &runs[0].final_sql, &steps), runs))
}

pub fn run_pipeline(
    criteria: CohortCriteria,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
    stage: &dyn Fn(Stage),
) -> Result<PipelineOutput, PipelineError> {
    let (query, cohort) = generate_cohort(&criteria, res, cfg, stage)?;
    let (funnel, funnel_queries, similarity) = if cfg.funnel {
        let (f, runs) = generate_funnel(&criteria, res, cfg, stage)?;
        let sim = funnel_similarity(&f.final_cohort, &cohort);
        (Some(f), runs, Some(sim))
    } else {
        (None, Vec::new(), None)
    };
    Ok(PipelineOutput {
        criteria,
        strategy: cfg.strategy,
        cohort,
        query,
        funnel,
        funnel_queries,
        funnel_similarity: similarity,
    })
}
