//! One pipeline run and the documents it produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cohort_core::cohort::Cohort;
use cohort_core::criteria::CohortCriteria;
use cohort_core::funnel::{Funnel, FunnelDocument, FunnelStep, StepKind};
use cohort_engine::pipeline::{
    generate_funnel, prepare_criteria, run_pipeline, PipelineConfig, PipelineError, QueryRun,
    Resources, Stage,
};

use crate::jobs::Overrides;

/// A funnel step with the criterion text it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStep {
    #[serde(flatten)]
    pub step: FunnelStep,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelOutput {
    pub steps: Vec<LabeledStep>,
    pub final_count: usize,
    /// Agreement with the single-query cohort, when one was generated.
    pub funnel_similarity: Option<f64>,
}

impl FunnelOutput {
    pub fn new(funnel: &Funnel, criteria: &CohortCriteria, similarity: Option<f64>) -> Self {
        let steps = funnel
            .steps
            .iter()
            .map(|s| {
                let text = match s.kind {
                    StepKind::Index => criteria.index_date_rule.clone(),
                    _ => criteria
                        .get(&s.criterion_id)
                        .map(|(_, c)| c.text.clone())
                        .unwrap_or_default(),
                };
                LabeledStep {
                    step: s.clone(),
                    text,
                }
            })
            .collect();
        FunnelOutput {
            steps,
            final_count: funnel.final_cohort.len(),
            funnel_similarity: similarity,
        }
    }

    pub fn document(&self) -> FunnelDocument {
        FunnelDocument {
            steps: self.steps.iter().map(|s| s.step.clone()).collect(),
            final_count: self.final_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlOutput {
    /// The single cohort query first (when generated), then the funnel steps.
    pub queries: Vec<QueryRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub cohort: Cohort,
    pub funnel: Option<FunnelOutput>,
    pub sql: SqlOutput,
}

/// Criteria as submitted: free text or already structured.
#[derive(Debug, Clone, PartialEq)]
pub enum CriteriaInput {
    Text(String),
    Structured(CohortCriteria),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Single cohort query, plus the funnel when the config asks for it.
    Cohort,
    /// Funnel steps only; the cohort is the funnel's final cohort.
    FunnelOnly,
}

pub fn apply_overrides(cfg: &mut PipelineConfig, o: &Overrides) {
    if let Some(k) = o.k {
        cfg.retrieval.k = k;
    }
    if let Some(m) = o.max_heal_iterations {
        cfg.healing.max_iterations = m;
    }
    if let Some(f) = o.funnel {
        cfg.funnel = f;
    }
    if let Some(b) = o.char_budget {
        cfg.prompt.char_budget = b;
    }
}

/// Turns the input into annotated structured criteria. Structured input is
/// expected to have passed [`cohort_core::criteria::validate_criteria`] already.
pub fn resolve_criteria(
    input: &CriteriaInput,
    res: &Resources<'_>,
) -> Result<CohortCriteria, PipelineError> {
    match input {
        CriteriaInput::Text(raw) => prepare_criteria(raw, res),
        CriteriaInput::Structured(c) => {
            let mut c = c.clone();
            if let Some(d) = res.detector {
                c.annotate(d).map_err(PipelineError::Detection)?;
            }
            Ok(c)
        }
    }
}

pub fn execute(
    criteria: &CohortCriteria,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
    mode: RunMode,
    stage: &dyn Fn(Stage),
) -> Result<RunOutputs, PipelineError> {
    match mode {
        RunMode::Cohort => {
            let out = run_pipeline(criteria.clone(), res, cfg, stage)?;
            let funnel = out
                .funnel
                .as_ref()
                .map(|f| FunnelOutput::new(f, criteria, out.funnel_similarity));
            let mut queries = vec![out.query];
            queries.extend(out.funnel_queries);
            Ok(RunOutputs {
                cohort: out.cohort,
                funnel,
                sql: SqlOutput { queries },
            })
        }
        RunMode::FunnelOnly => {
            let (f, runs) = generate_funnel(criteria, res, cfg, stage)?;
            Ok(RunOutputs {
                cohort: f.final_cohort.clone(),
                funnel: Some(FunnelOutput::new(&f, criteria, None)),
                sql: SqlOutput { queries: runs },
            })
        }
    }
}

pub const COHORT_FILE: &str = "cohort.csv";
pub const FUNNEL_FILE: &str = "funnel.json";
pub const SQL_FILE: &str = "sql.json";

/// Writes the cohort CSV, funnel document and SQL document into `dir`.
/// Returns the paths written.
pub fn write_outputs(dir: &Path, out: &RunOutputs) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let cohort = dir.join(COHORT_FILE);
    std::fs::write(&cohort, out.cohort.to_csv_string())?;
    written.push(cohort);
    if let Some(f) = &out.funnel {
        let p = dir.join(FUNNEL_FILE);
        std::fs::write(&p, serde_json::to_vec_pretty(f).expect("funnel serializes"))?;
        written.push(p);
    }
    let p = dir.join(SQL_FILE);
    std::fs::write(
        &p,
        serde_json::to_vec_pretty(&out.sql).expect("sql serializes"),
    )?;
    written.push(p);
    Ok(written)
}
