//! Persistent job records: one JSON file per job under the jobs directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use cohort_core::criteria::CohortCriteria;
use cohort_core::generation::Strategy;
use cohort_engine::pipeline::Stage;

use crate::run::RunOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Parsing,
    Retrieving,
    Generating,
    Normalizing,
    Healing,
    Executing,
    Funneling,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn name(self) -> &'static str {
        match self {
            JobState::Queued => "QUEUED",
            JobState::Parsing => "PARSING",
            JobState::Retrieving => "RETRIEVING",
            JobState::Generating => "GENERATING",
            JobState::Normalizing => "NORMALIZING",
            JobState::Healing => "HEALING",
            JobState::Executing => "EXECUTING",
            JobState::Funneling => "FUNNELING",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
        }
    }
}

impl From<Stage> for JobState {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Parsing => JobState::Parsing,
            Stage::Retrieving => JobState::Retrieving,
            Stage::Generating => JobState::Generating,
            Stage::Normalizing => JobState::Normalizing,
            Stage::Healing => JobState::Healing,
            Stage::Executing => JobState::Executing,
            Stage::Funneling => JobState::Funneling,
        }
    }
}

/// Per-job pipeline settings that differ from the service config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_heal_iterations: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub funnel: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub strategy: Strategy,
    /// Raw text as submitted, when criteria came in as text.
    #[serde(default)]
    pub criteria_text: Option<String>,
    /// Structured criteria; filled during PARSING for text submissions.
    #[serde(default)]
    pub criteria: Option<CohortCriteria>,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub outputs: Option<RunOutputs>,
    #[serde(default)]
    pub error: Option<String>,
    /// Every state entered, with its time.
    #[serde(default)]
    pub history: Vec<(JobState, DateTime<Utc>)>,
}

impl Job {
    pub fn new(
        strategy: Strategy,
        criteria_text: Option<String>,
        criteria: Option<CohortCriteria>,
        overrides: Overrides,
    ) -> Self {
        let now = Utc::now();
        Job {
            job_id: uuid::Uuid::new_v4().to_string(),
            state: JobState::Queued,
            created_at: now,
            updated_at: now,
            strategy,
            criteria_text,
            criteria,
            overrides,
            outputs: None,
            error: None,
            history: vec![(JobState::Queued, now)],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("job store {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("job file {path}: {source}")]
    Corrupt {
        path: String,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const RESTART_ERROR: &str = "service restarted before the job finished";

/// In-memory map mirrored to disk. All writes go through one lock, so the
/// file on disk never lags behind what readers have observed.
#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    retention: Duration,
    jobs: RwLock<BTreeMap<String, Job>>,
}

impl JobStore {
    /// Loads every job file in `dir`. Jobs left unfinished by a previous
    /// process are marked FAILED; expired jobs are deleted.
    pub fn open(dir: impl Into<PathBuf>, retention_days: u32) -> Result<Self, StoreError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let store = JobStore {
            dir: dir.clone(),
            retention: Duration::days(i64::from(retention_days)),
            jobs: RwLock::new(BTreeMap::new()),
        };
        let mut loaded = BTreeMap::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let raw = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut job: Job =
                serde_json::from_str(&raw).map_err(|source| StoreError::Corrupt {
                    path: path.display().to_string(),
                    source,
                })?;
            if !job.state.is_terminal() {
                let now = Utc::now();
                job.state = JobState::Failed;
                job.error = Some(RESTART_ERROR.into());
                job.updated_at = now;
                job.history.push((JobState::Failed, now));
                store.persist(&job)?;
            }
            loaded.insert(job.job_id.clone(), job);
        }
        *store.jobs.write().expect("job store poisoned") = loaded;
        store.purge_expired(Utc::now())?;
        Ok(store)
    }

    fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn persist(&self, job: &Job) -> Result<(), StoreError> {
        let path = self.path_of(&job.job_id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(job).expect("jobs serialize");
        std::fs::write(&tmp, body).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn insert(&self, job: Job) -> Result<(), StoreError> {
        let mut jobs = self.jobs.write().expect("job store poisoned");
        self.persist(&job)?;
        jobs.insert(job.job_id.clone(), job);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs
            .read()
            .expect("job store poisoned")
            .get(id)
            .cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.jobs
            .read()
            .expect("job store poisoned")
            .keys()
            .cloned()
            .collect()
    }

    /// Applies `f` to a live job and persists it. Terminal jobs are frozen:
    /// returns `Ok(false)` without calling `f`.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> Result<bool, StoreError> {
        let mut jobs = self.jobs.write().expect("job store poisoned");
        let Some(job) = jobs.get_mut(id) else {
            return Ok(false);
        };
        if job.state.is_terminal() {
            return Ok(false);
        }
        let before = job.state;
        f(job);
        // observers must never see a state earlier than one already shown
        if job.state < before {
            job.state = before;
        }
        let now = Utc::now();
        job.updated_at = now;
        if job.state != before {
            job.history.push((job.state, now));
        }
        self.persist(job)?;
        Ok(true)
    }

    /// Moves a job forward to `state`; never backwards.
    pub fn advance(&self, id: &str, state: JobState) -> Result<bool, StoreError> {
        self.update(id, |j| {
            if state > j.state {
                j.state = state;
            }
        })
    }

    pub fn fail(&self, id: &str, error: impl Into<String>) -> Result<bool, StoreError> {
        let error = error.into();
        self.update(id, |j| {
            j.state = JobState::Failed;
            j.error = Some(error);
        })
    }

    pub fn finish(
        &self,
        id: &str,
        outputs: RunOutputs,
        criteria: CohortCriteria,
    ) -> Result<bool, StoreError> {
        self.update(id, |j| {
            j.state = JobState::Done;
            j.outputs = Some(outputs);
            j.criteria = Some(criteria);
        })
    }

    /// Deletes jobs created before `now - retention`. Returns how many.
    pub fn purge_expired(&self, now: DateTime<Utc>) -> Result<usize, StoreError> {
        let cutoff = now - self.retention;
        let mut jobs = self.jobs.write().expect("job store poisoned");
        let expired: Vec<String> = jobs
            .values()
            .filter(|j| j.created_at < cutoff)
            .map(|j| j.job_id.clone())
            .collect();
        for id in &expired {
            let path = self.path_of(id);
            match std::fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path)(e)),
            }
            jobs.remove(id);
        }
        Ok(expired.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn job() -> Job {
        Job::new(
            Strategy::RagAc,
            Some("x".into()),
            None,
            Overrides::default(),
        )
    }

    #[test]
    fn state_only_moves_forward_and_freezes_when_terminal() {
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::open(dir.path(), 30).unwrap();
        let j = job();
        let id = j.job_id.clone();
        store.insert(j).unwrap();
        store.advance(&id, JobState::Healing).unwrap();
        store.advance(&id, JobState::Retrieving).unwrap();
        assert_eq!(store.get(&id).unwrap().state, JobState::Healing);
        store.fail(&id, "boom").unwrap();
        assert!(!store.advance(&id, JobState::Done).unwrap());
        let j = store.get(&id).unwrap();
        assert_eq!(j.state, JobState::Failed);
        assert_eq!(j.error.as_deref(), Some("boom"));
        let states: Vec<JobState> = j.history.iter().map(|h| h.0).collect();
        assert_eq!(
            states,
            vec![JobState::Queued, JobState::Healing, JobState::Failed]
        );
    }

    #[test]
    fn reopening_keeps_history_and_fails_interrupted_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let (done, running) = {
            let store = JobStore::open(dir.path(), 30).unwrap();
            let a = job();
            let b = job();
            let (ia, ib) = (a.job_id.clone(), b.job_id.clone());
            store.insert(a).unwrap();
            store.insert(b).unwrap();
            store.fail(&ia, "bad input").unwrap();
            store.advance(&ib, JobState::Generating).unwrap();
            (ia, ib)
        };
        let store = JobStore::open(dir.path(), 30).unwrap();
        assert_eq!(store.ids().len(), 2);
        assert_eq!(
            store.get(&done).unwrap().error.as_deref(),
            Some("bad input")
        );
        let r = store.get(&running).unwrap();
        assert_eq!(r.state, JobState::Failed);
        assert_eq!(r.error.as_deref(), Some(RESTART_ERROR));
    }

    #[test]
    fn retention_deletes_old_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let store = JobStore::open(dir.path(), 30).unwrap();
        let mut old = job();
        old.created_at = Utc::now() - Duration::days(31);
        let old_id = old.job_id.clone();
        let fresh = job();
        let fresh_id = fresh.job_id.clone();
        store.insert(old).unwrap();
        store.insert(fresh).unwrap();
        assert_eq!(store.purge_expired(Utc::now()).unwrap(), 1);
        assert!(store.get(&old_id).is_none());
        assert!(store.get(&fresh_id).is_some());
        assert!(!dir.path().join(format!("{old_id}.json")).exists());
    }
}
