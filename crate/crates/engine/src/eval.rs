//! Strategy comparison over held-out samples with leave-one-out retrieval.

use cohort_core::backend::ExecError;
use cohort_core::cohort::Cohort;
use cohort_core::criteria::{parse_structured, CohortCriteria};
use cohort_core::entity::EntityDetector;
use cohort_core::kb::KbEntry;
use cohort_core::metrics::{
    aggregate, score_sample, EvalConfig, EvalReport, ExcludedSample, SampleOutcome,
};
use cohort_core::normalize::{normalize_placeholders, resolve_placeholders, NormalizeConfig};
use cohort_core::placeholder::parse_placeholders;

use crate::pipeline::{generate_cohort, PipelineConfig, Resources};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    /// Also the id of the sample's own knowledge-base entry.
    pub id: String,
    pub criteria: CohortCriteria,
    pub reference_sql: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("backend unavailable, evaluation aborted: {0}")]
    BackendUnavailable(String),
}

/// Turns criteria-KB entries into samples; entries whose text is not in the
/// structured criteria format are reported and skipped.
pub fn samples_from_kb(
    entries: &[KbEntry],
    detector: Option<&dyn EntityDetector>,
) -> (Vec<EvalSample>, Vec<ExcludedSample>) {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        match parse_structured(&e.natural_text) {
            Ok(mut criteria) => {
                if let Some(d) = detector {
                    if let Err(err) = criteria.annotate(d) {
                        skipped.push(ExcludedSample {
                            sample_id: e.id.clone(),
                            note: format!("entity detection failed: {err}"),
                        });
                        continue;
                    }
                }
                samples.push(EvalSample {
                    id: e.id.clone(),
                    criteria,
                    reference_sql: e.sql.clone(),
                });
            }
            Err(err) => skipped.push(ExcludedSample {
                sample_id: e.id.clone(),
                note: format!("criteria text not parseable: {err}"),
            }),
        }
    }
    (samples, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceError {
    Unavailable(String),
    Failed(String),
}

/// Executes a reference query, resolving placeholders against the vocabulary
/// first when it has any.
pub fn reference_cohort(
    sql: &str,
    res: &Resources<'_>,
    norm: &NormalizeConfig,
) -> Result<Cohort, ReferenceError> {
    let failed = |e: &dyn std::fmt::Display| ReferenceError::Failed(e.to_string());
    let ps = parse_placeholders(sql).map_err(|e| failed(&e))?;
    let sql = if ps.is_empty() {
        sql.to_string()
    } else {
        let mut ms = Vec::new();
        for r in normalize_placeholders(&ps, res.vocab, None, norm) {
            ms.push(r.map_err(|e| failed(&e))?);
        }
        resolve_placeholders(sql, &ms).map_err(|e| failed(&e))?
    };
    match res.executor.execute(&sql) {
        Ok(rows) => rows.to_cohort().map_err(|e| failed(&e)),
        Err(ExecError::Unavailable { message }) => Err(ReferenceError::Unavailable(message)),
        Err(e) => Err(failed(&e)),
    }
}

pub fn run_eval(
    samples: &[EvalSample],
    res: &Resources<'_>,
    base: &PipelineConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport {
        window_days: cfg.window_days,
        rows: Vec::new(),
        excluded: Vec::new(),
        samples: Vec::new(),
    };
    let mut references = Vec::new();
    for s in samples {
        match reference_cohort(&s.reference_sql, res, &base.normalize) {
            Ok(c) => references.push((s, c)),
            Err(ReferenceError::Unavailable(m)) => return Err(EvalError::BackendUnavailable(m)),
            Err(ReferenceError::Failed(note)) => report.excluded.push(ExcludedSample {
                sample_id: s.id.clone(),
                note,
            }),
        }
    }

    for &strategy in &cfg.strategies {
        let mut results = Vec::with_capacity(references.len());
        for (sample, reference) in &references {
            let mut pcfg = base.clone();
            pcfg.strategy = strategy;
            pcfg.funnel = false;
            if cfg.leave_one_out {
                pcfg.retrieval.exclude_ids.insert(sample.id.clone());
            }
            let outcome = match generate_cohort(&sample.criteria, res, &pcfg, &|_| {}) {
                Ok((_, cohort)) => SampleOutcome::Executed(cohort),
                Err(e) if e.is_backend_unavailable() => {
                    return Err(EvalError::BackendUnavailable(e.to_string()));
                }
                Err(e) => SampleOutcome::Invalid {
                    reason: e.to_string(),
                },
            };
            let r = score_sample(&sample.id, &outcome, reference, cfg.window_days);
            report.samples.push((strategy, r.clone()));
            results.push(r);
        }
        report.rows.push(aggregate(strategy, &results));
    }
    Ok(report)
}
