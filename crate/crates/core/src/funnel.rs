//! Patient attrition funnels built from per-criterion person sets.

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PersonSet};
use crate::criteria::CriterionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepKind {
    Index,
    Inclusion,
    Exclusion,
}

impl From<CriterionKind> for StepKind {
    fn from(k: CriterionKind) -> Self {
        match k {
            CriterionKind::Inclusion => StepKind::Inclusion,
            CriterionKind::Exclusion => StepKind::Exclusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStep {
    pub step_index: usize,
    pub criterion_id: String,
    pub kind: StepKind,
    pub remaining_count: usize,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub steps: Vec<FunnelStep>,
    #[serde(skip)]
    pub final_cohort: Cohort,
}

/// The persons matched by one criterion's standalone query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriterionCohort {
    pub criterion_id: String,
    pub kind: CriterionKind,
    pub sql: String,
    pub persons: PersonSet,
}

impl CriterionCohort {
    pub fn new(criterion_id: impl Into<String>, kind: CriterionKind, persons: PersonSet) -> Self {
        CriterionCohort {
            criterion_id: criterion_id.into(),
            kind,
            sql: String::new(),
            persons,
        }
    }
}

pub const INDEX_STEP_ID: &str = "index";

/// Folds criterion person sets over the index cohort in the given order:
/// inclusions intersect, exclusions subtract. Index dates always come from
/// the index cohort.
pub fn compute_funnel(
    index_cohort: &Cohort,
    index_sql: &str,
    criteria: &[CriterionCohort],
) -> Funnel {
    let mut remaining = index_cohort.clone();
    let mut steps = vec![FunnelStep {
        step_index: 0,
        criterion_id: INDEX_STEP_ID.to_string(),
        kind: StepKind::Index,
        remaining_count: remaining.len(),
        sql: index_sql.to_string(),
    }];
    for (i, c) in criteria.iter().enumerate() {
        match c.kind {
            CriterionKind::Inclusion => remaining.retain(|p| c.persons.contains(&p)),
            CriterionKind::Exclusion => remaining.retain(|p| !c.persons.contains(&p)),
        }
        steps.push(FunnelStep {
            step_index: i + 1,
            criterion_id: c.criterion_id.clone(),
            kind: c.kind.into(),
            remaining_count: remaining.len(),
            sql: c.sql.clone(),
        });
    }
    Funnel {
        steps,
        final_cohort: remaining,
    }
}

/// min(|A|, |B|) / max(|A|, |B|); two empty cohorts are identical (1.0).
pub fn funnel_similarity(funnel_final: &Cohort, monolithic: &Cohort) -> f64 {
    let (a, b) = (funnel_final.len(), monolithic.len());
    if a == 0 && b == 0 {
        1.0
    } else {
        a.min(b) as f64 / a.max(b) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelDocument {
    pub steps: Vec<FunnelStep>,
    pub final_count: usize,
}

impl Funnel {
    pub fn counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.remaining_count).collect()
    }

    pub fn document(&self) -> FunnelDocument {
        FunnelDocument {
            steps: self.steps.clone(),
            final_count: self.final_cohort.len(),
        }
    }
}

impl FunnelDocument {
    /// Checks the structural invariants a consumer may rely on.
    pub fn check(&self) -> Result<(), String> {
        let first = self.steps.first().ok_or("funnel has no steps")?;
        if first.kind != StepKind::Index {
            return Err("first step must be the index step".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.step_index != i {
                return Err(format!("step {i} has step_index {}", s.step_index));
            }
        }
        if self
            .steps
            .windows(2)
            .any(|w| w[1].remaining_count > w[0].remaining_count)
        {
            return Err("remaining counts increase between steps".into());
        }
        if self.steps.last().map(|s| s.remaining_count) != Some(self.final_count) {
            return Err("final_count differs from the last step".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn cohort(ids: &[i64]) -> Cohort {
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        Cohort::try_from_rows(ids.iter().map(|&p| (p, d))).unwrap()
    }

    fn set(ids: &[i64]) -> PersonSet {
        ids.iter().copied().collect()
    }

    #[test]
    fn inclusion_then_exclusion() {
        let f = compute_funnel(
            &cohort(&[1, 2, 3]),
            "",
            &[
                CriterionCohort::new("inc-1", CriterionKind::Inclusion, set(&[2, 3])),
                CriterionCohort::new("exc-1", CriterionKind::Exclusion, set(&[3])),
            ],
        );
        assert_eq!(f.counts(), vec![3, 2, 1]);
        assert_eq!(f.final_cohort.persons(), set(&[2]));
        assert!(f.document().check().is_ok());
    }

    #[test]
    fn no_criteria_is_index_only() {
        let idx = cohort(&[1, 2]);
        let f = compute_funnel(&idx, "SELECT 1", &[]);
        assert_eq!(f.steps.len(), 1);
        assert_eq!(f.steps[0].kind, StepKind::Index);
        assert_eq!(f.final_cohort, idx);
    }

    #[test]
    fn worked_example_shape() {
        // 10,000 -> 8,000 after an age rule -> 5,000 after a medication exclusion
        let all: Vec<i64> = (0..10_000).collect();
        let adults: PersonSet = (0..8_000).collect();
        let on_drug: PersonSet = (5_000..8_000).collect();
        let f = compute_funnel(
            &cohort(&all),
            "",
            &[
                CriterionCohort::new("inc-1", CriterionKind::Inclusion, adults),
                CriterionCohort::new("exc-1", CriterionKind::Exclusion, on_drug),
            ],
        );
        assert_eq!(f.counts(), vec![10_000, 8_000, 5_000]);
    }

    #[test]
    fn index_dates_carried_from_index_cohort() {
        let d1 = NaiveDate::from_ymd_opt(2021, 3, 4).unwrap();
        let idx = Cohort::try_from_rows([(7, d1)]).unwrap();
        let f = compute_funnel(
            &idx,
            "",
            &[CriterionCohort::new(
                "inc-1",
                CriterionKind::Inclusion,
                set(&[7, 8]),
            )],
        );
        assert_eq!(f.final_cohort.index_date(7), Some(d1));
        assert!(!f.final_cohort.contains(8));
    }

    #[test]
    fn similarity() {
        assert_eq!(funnel_similarity(&cohort(&[1, 2]), &cohort(&[1, 2])), 1.0);
        let ninety: Vec<i64> = (0..90).collect();
        let hundred: Vec<i64> = (0..100).collect();
        assert!((funnel_similarity(&cohort(&ninety), &cohort(&hundred)) - 0.9).abs() < 1e-12);
        assert_eq!(funnel_similarity(&cohort(&[]), &cohort(&[1])), 0.0);
        assert_eq!(funnel_similarity(&cohort(&[]), &cohort(&[])), 1.0);
    }

    proptest! {
        #[test]
        fn counts_never_increase_and_order_of_persons_is_irrelevant(
            index in prop::collection::btree_set(0i64..60, 0..40),
            sets in prop::collection::vec((any::<bool>(), prop::collection::vec(0i64..60, 0..40)), 0..6),
        ) {
            let idx = cohort(&index.iter().copied().collect::<Vec<_>>());
            let crit: Vec<CriterionCohort> = sets.iter().enumerate().map(|(i, (inc, ids))| {
                let kind = if *inc { CriterionKind::Inclusion } else { CriterionKind::Exclusion };
                CriterionCohort::new(format!("c{i}"), kind, ids.iter().copied().collect())
            }).collect();
            let reversed: Vec<CriterionCohort> = sets.iter().enumerate().map(|(i, (inc, ids))| {
                let kind = if *inc { CriterionKind::Inclusion } else { CriterionKind::Exclusion };
                CriterionCohort::new(format!("c{i}"), kind, ids.iter().rev().copied().collect())
            }).collect();
            let f = compute_funnel(&idx, "", &crit);
            prop_assert!(f.document().check().is_ok());
            prop_assert_eq!(f, compute_funnel(&idx, "", &reversed));
        }
    }
}
