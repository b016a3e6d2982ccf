//! HTTP job service.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{json, Value};

use cohort_core::criteria::{validate_criteria, CohortCriteria};
use cohort_core::generation::Strategy;
use cohort_core::kb::{KbKind, KbStats};
use cohort_engine::pipeline::Stage;

use crate::context::AppContext;
use crate::jobs::{Job, JobState, JobStore, Overrides};
use crate::run::{apply_overrides, execute, resolve_criteria, CriteriaInput, RunMode};

pub struct AppState {
    pub ctx: Arc<AppContext>,
    pub store: Arc<JobStore>,
    pub job_timeout: Duration,
    kb_stats: Value,
}

impl AppState {
    pub fn new(ctx: Arc<AppContext>, store: Arc<JobStore>) -> Self {
        let job_timeout = Duration::from_secs(ctx.config.service.job_timeout_secs);
        let mut stats = json!({ "ask": null, "coho": null });
        for (kind, s) in ctx.kb_stats() {
            let key = match kind {
                KbKind::Ask => "ask",
                KbKind::Coho => "coho",
            };
            stats[key] = match s {
                Ok(s) => serde_json::to_value::<&KbStats>(&s).expect("stats serialize"),
                Err(e) => json!({ "error": e }),
            };
        }
        AppState {
            ctx,
            store,
            job_timeout,
            kb_stats: stats,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub criteria: CriteriaInput,
    pub strategy: Strategy,
    pub overrides: Overrides,
}

fn valid_strategies() -> String {
    Strategy::ALL
        .iter()
        .map(|s| serde_json::to_value(s).expect("strategy serializes"))
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Validates a POST /jobs body, collecting every problem at once.
pub fn parse_submission(
    body: &[u8],
    default_strategy: Strategy,
) -> Result<Submission, Vec<FieldError>> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| vec![field("body", format!("not valid JSON: {e}"))])?;
    let Value::Object(obj) = value else {
        return Err(vec![field("body", "expected a JSON object")]);
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !matches!(key.as_str(), "criteria" | "strategy" | "overrides") {
            errors.push(field(key, "unknown field"));
        }
    }

    let criteria = match obj.get("criteria") {
        None | Some(Value::Null) => {
            errors.push(field("criteria", "required"));
            None
        }
        Some(Value::String(s)) if s.trim().is_empty() => {
            errors.push(field("criteria", "criteria text is empty"));
            None
        }
        Some(Value::String(s)) => Some(CriteriaInput::Text(s.clone())),
        Some(v @ Value::Object(_)) => match serde_json::from_value::<CohortCriteria>(v.clone()) {
            Ok(c) => {
                let violations = validate_criteria(&c);
                if violations.is_empty() {
                    Some(CriteriaInput::Structured(c))
                } else {
                    errors.extend(violations.into_iter().map(|m| field("criteria", m)));
                    None
                }
            }
            Err(e) => {
                errors.push(field("criteria", e.to_string()));
                None
            }
        },
        Some(_) => {
            errors.push(field(
                "criteria",
                "expected criteria text or a structured criteria object",
            ));
            None
        }
    };

    let strategy = match obj.get("strategy") {
        None | Some(Value::Null) => Some(default_strategy),
        Some(Value::String(s)) => match s.parse::<Strategy>() {
            Ok(s) => Some(s),
            Err(_) => {
                errors.push(field(
                    "strategy",
                    format!(
                        "unknown strategy {s:?}; valid values: {}",
                        valid_strategies()
                    ),
                ));
                None
            }
        },
        Some(_) => {
            errors.push(field(
                "strategy",
                format!("expected a string; valid values: {}", valid_strategies()),
            ));
            None
        }
    };

    let overrides = match obj.get("overrides") {
        None | Some(Value::Null) => Some(Overrides::default()),
        Some(v) => match serde_json::from_value::<Overrides>(v.clone()) {
            Ok(o) if o.k == Some(0) => {
                errors.push(field("overrides.k", "must be at least 1"));
                None
            }
            Ok(o) if o.char_budget == Some(0) => {
                errors.push(field("overrides.char_budget", "must be positive"));
                None
            }
            Ok(o) => Some(o),
            Err(e) => {
                errors.push(field("overrides", e.to_string()));
                None
            }
        },
    };

    match (criteria, strategy, overrides) {
        (Some(criteria), Some(strategy), Some(overrides)) if errors.is_empty() => Ok(Submission {
            criteria,
            strategy,
            overrides,
        }),
        _ => Err(errors),
    }
}

fn error_body(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    error_body(StatusCode::NOT_FOUND, format!("no job with id {id}"))
}

fn internal(e: impl std::fmt::Display) -> Response {
    error_body(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// Job record without its (possibly large) outputs.
#[derive(Debug, Serialize)]
pub struct JobView {
    pub job_id: String,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub strategy: Strategy,
    pub criteria_text: Option<String>,
    pub criteria: Option<CohortCriteria>,
    pub overrides: Overrides,
    pub error: Option<String>,
    pub history: Vec<(JobState, DateTime<Utc>)>,
    pub cohort_size: Option<usize>,
    pub funnel_similarity: Option<f64>,
}

impl From<Job> for JobView {
    fn from(j: Job) -> Self {
        let cohort_size = j.outputs.as_ref().map(|o| o.cohort.len());
        let funnel_similarity = j
            .outputs
            .as_ref()
            .and_then(|o| o.funnel.as_ref())
            .and_then(|f| f.funnel_similarity);
        JobView {
            job_id: j.job_id,
            state: j.state,
            created_at: j.created_at,
            updated_at: j.updated_at,
            strategy: j.strategy,
            criteria_text: j.criteria_text,
            criteria: j.criteria,
            overrides: j.overrides,
            error: j.error,
            history: j.history,
            cohort_size,
            funnel_similarity,
        }
    }
}

async fn submit(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let sub = match parse_submission(&body, st.ctx.config.pipeline.strategy) {
        Ok(s) => s,
        Err(fields) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "invalid job request", "fields": fields })),
            )
                .into_response()
        }
    };
    let (text, structured) = match &sub.criteria {
        CriteriaInput::Text(t) => (Some(t.clone()), None),
        CriteriaInput::Structured(c) => (None, Some(c.clone())),
    };
    let job = Job::new(sub.strategy, text, structured, sub.overrides);
    let id = job.job_id.clone();
    if let Err(e) = st.store.insert(job) {
        return internal(e);
    }
    tokio::spawn(run_job(st.clone(), id.clone(), sub.criteria));
    (
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": id, "state": JobState::Queued })),
    )
        .into_response()
}

fn log_store_error<T>(r: Result<T, crate::jobs::StoreError>) {
    if let Err(e) = r {
        eprintln!("job store: {e}");
    }
}

/// Runs one job to DONE or FAILED, bounded by the configured timeout.
pub async fn run_job(st: Arc<AppState>, id: String, input: CriteriaInput) {
    let worker = st.clone();
    let wid = id.clone();
    let handle = tokio::task::spawn_blocking(move || run_job_blocking(&worker, &wid, &input));
    match tokio::time::timeout(st.job_timeout, handle).await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => log_store_error(st.store.fail(&id, format!("job worker crashed: {e}"))),
        // the worker thread cannot be cancelled; its late result is dropped
        // because FAILED is terminal
        Err(_) => log_store_error(st.store.fail(
            &id,
            format!("job timed out after {} s", st.job_timeout.as_secs()),
        )),
    }
}

fn run_job_blocking(st: &AppState, id: &str, input: &CriteriaInput) {
    let store = &st.store;
    let Some(job) = store.get(id) else { return };
    let res = st.ctx.resources();
    let stage = |s: Stage| log_store_error(store.advance(id, s.into()));
    stage(Stage::Parsing);
    let criteria = match resolve_criteria(input, &res) {
        Ok(c) => c,
        Err(e) => return log_store_error(store.fail(id, e.to_string())),
    };
    log_store_error(store.update(id, |j| j.criteria = Some(criteria.clone())));
    let mut cfg = st.ctx.pipeline_config();
    cfg.strategy = job.strategy;
    apply_overrides(&mut cfg, &job.overrides);
    match execute(&criteria, &res, &cfg, RunMode::Cohort, &stage) {
        Ok(out) => log_store_error(store.finish(id, out, criteria)),
        Err(e) => log_store_error(store.fail(id, e.to_string())),
    }
}

async fn get_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match st.store.get(&id) {
        Some(j) => Json(JobView::from(j)).into_response(),
        None => not_found(&id),
    }
}

/// The job if it is DONE, else the not-found or conflict response.
fn done_job(st: &AppState, id: &str) -> Result<Job, Response> {
    let job = st.store.get(id).ok_or_else(|| not_found(id))?;
    if job.state != JobState::Done {
        let mut body = json!({
            "error": format!("job {id} is {}; outputs are available once it is DONE", job.state.name()),
            "state": job.state,
        });
        if let Some(e) = &job.error {
            body["job_error"] = json!(e);
        }
        return Err((StatusCode::CONFLICT, Json(body)).into_response());
    }
    Ok(job)
}

async fn get_funnel(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let job = match done_job(&st, &id) {
        Ok(j) => j,
        Err(r) => return r,
    };
    match job.outputs.and_then(|o| o.funnel) {
        Some(f) => Json(f).into_response(),
        None => error_body(
            StatusCode::NOT_FOUND,
            format!("job {id} ran without a funnel"),
        ),
    }
}

async fn get_cohort(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let job = match done_job(&st, &id) {
        Ok(j) => j,
        Err(r) => return r,
    };
    let csv = job
        .outputs
        .map(|o| o.cohort.to_csv_string())
        .unwrap_or_default();
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response()
}

async fn get_sql(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match done_job(&st, &id) {
        Ok(j) => match j.outputs {
            Some(o) => Json(o.sql).into_response(),
            None => internal("DONE job without outputs"),
        },
        Err(r) => r,
    }
}

async fn kb_stats(State(st): State<Arc<AppState>>) -> Response {
    Json(st.kb_stats.clone()).into_response()
}

async fn healthz() -> Response {
    Json(json!({ "status": "ok" })).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/jobs", post(submit))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/funnel", get(get_funnel))
        .route("/jobs/{id}/cohort", get(get_cohort))
        .route("/jobs/{id}/sql", get(get_sql))
        .route("/kb/stats", get(kb_stats))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until `shutdown` resolves, purging expired jobs hourly.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let store = state.store.clone();
    let purge = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(3600));
        loop {
            tick.tick().await;
            log_store_error(store.purge_expired(Utc::now()));
        }
    });
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    purge.abort();
    result
}
