//! wasm-bindgen exports for the static demo page. Every export takes and
//! returns JSON text; the plain functions below are what the tests call.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use cohort_core::cohort::{Cohort, PersonSet};
use cohort_core::criteria::CriterionKind;
use cohort_core::funnel::{compute_funnel, CriterionCohort, FunnelDocument};
use cohort_core::metrics::{
    date_metrics, patient_metrics, size_similarity, DateMetrics, PatientMetrics,
};
use cohort_core::sql_complexity::analyze_sql;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunnelInput {
    /// CSV with `person_id,index_date`.
    index: String,
    criteria: Vec<CriterionInput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriterionInput {
    id: String,
    kind: CriterionKind,
    persons: PersonSet,
}

#[derive(Debug, Serialize)]
struct Comparison {
    generated: usize,
    reference: usize,
    #[serde(flatten)]
    patients: PatientMetrics,
    size_similarity: f64,
    dates: DateMetrics,
}

fn cohort(csv: &str, what: &str) -> Result<Cohort, String> {
    Cohort::read_csv(csv.as_bytes()).map_err(|e| format!("{what}: {e}"))
}

pub fn funnel_json(input: &str) -> Result<String, String> {
    let input: FunnelInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let index = cohort(&input.index, "index cohort")?;
    let criteria: Vec<CriterionCohort> = input
        .criteria
        .into_iter()
        .map(|c| CriterionCohort::new(c.id, c.kind, c.persons))
        .collect();
    let doc: FunnelDocument = compute_funnel(&index, "", &criteria).document();
    Ok(serde_json::to_string(&doc).expect("funnel serializes"))
}

pub fn sql_profile_json(sql: &str) -> Result<String, String> {
    let c = analyze_sql(sql).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&c).expect("profile serializes"))
}

pub fn compare_json(
    generated_csv: &str,
    reference_csv: &str,
    window_days: u32,
) -> Result<String, String> {
    let g = cohort(generated_csv, "generated cohort")?;
    let r = cohort(reference_csv, "reference cohort")?;
    let out = Comparison {
        generated: g.len(),
        reference: r.len(),
        patients: patient_metrics(&g, &r),
        size_similarity: size_similarity(&g, &r),
        dates: date_metrics(&g, &r, window_days),
    };
    Ok(serde_json::to_string(&out).expect("comparison serializes"))
}

/// Attrition funnel from an index cohort and per-criterion person sets.
#[wasm_bindgen]
pub fn funnel(input: &str) -> Result<String, JsError> {
    funnel_json(input).map_err(|e| JsError::new(&e))
}

/// Structural complexity of one SQL query.
#[wasm_bindgen]
pub fn sql_profile(sql: &str) -> Result<String, JsError> {
    sql_profile_json(sql).map_err(|e| JsError::new(&e))
}

/// Patient- and date-level agreement between two cohorts.
#[wasm_bindgen]
pub fn compare(
    generated_csv: &str,
    reference_csv: &str,
    window_days: u32,
) -> Result<String, JsError> {
    compare_json(generated_csv, reference_csv, window_days).map_err(|e| JsError::new(&e))
}
