//! Seeded generator for a small OMOP CDM database.
//!
//! Patients get a handful of chronic conditions; treatments, visits,
//! procedures and measurements follow from those conditions so that typical
//! cohort criteria select non-trivial subsets.

use std::fmt::Write as _;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};

use cohort_core::backend::ExecError;

use crate::sqlite::SqliteBackend;
use crate::vocab::{self, CONCEPTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRates {
    pub visits_per_year: f64,
    /// Multiplies every condition prevalence.
    pub condition_scale: f64,
    /// Multiplies every treatment uptake probability.
    pub treatment_scale: f64,
    /// Chance that an outpatient visit records each relevant measurement.
    pub measurement_prob: f64,
}

impl Default for EventRates {
    fn default() -> Self {
        EventRates {
            visits_per_year: 3.0,
            condition_scale: 1.0,
            treatment_scale: 1.0,
            measurement_prob: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDbSpec {
    pub seed: u64,
    pub n_persons: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    #[serde(default)]
    pub rates: EventRates,
}

impl Default for SyntheticDbSpec {
    fn default() -> Self {
        SyntheticDbSpec {
            seed: 42,
            n_persons: 1000,
            start: NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2023, 12, 31).expect("valid date"),
            rates: EventRates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("n_persons must be at least 1")]
    NoPersons,
    #[error("start date {start} is after end date {end}")]
    DateRange { start: NaiveDate, end: NaiveDate },
    #[error("rate `{0}` must be finite and non-negative")]
    BadRate(&'static str),
}

impl SyntheticDbSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.n_persons == 0 {
            return Err(SpecError::NoPersons);
        }
        if self.start > self.end {
            return Err(SpecError::DateRange {
                start: self.start,
                end: self.end,
            });
        }
        let r = &self.rates;
        for (name, v) in [
            ("visits_per_year", r.visits_per_year),
            ("condition_scale", r.condition_scale),
            ("treatment_scale", r.treatment_scale),
            ("measurement_prob", r.measurement_prob),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SpecError::BadRate(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Person {
    pub person_id: i64,
    pub gender_concept_id: i64,
    pub year_of_birth: i32,
    pub month_of_birth: u32,
    pub day_of_birth: u32,
    pub provider_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationPeriod {
    pub observation_period_id: i64,
    pub person_id: i64,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Visit {
    pub visit_occurrence_id: i64,
    pub person_id: i64,
    pub visit_concept_id: i64,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub provider_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionOccurrence {
    pub condition_occurrence_id: i64,
    pub person_id: i64,
    pub condition_concept_id: i64,
    pub start: NaiveDate,
    pub end: Option<NaiveDate>,
    pub visit_occurrence_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrugExposure {
    pub drug_exposure_id: i64,
    pub person_id: i64,
    pub drug_concept_id: i64,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub days_supply: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrugEra {
    pub drug_era_id: i64,
    pub person_id: i64,
    pub drug_concept_id: i64,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub drug_exposure_count: i64,
    pub gap_days: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcedureOccurrence {
    pub procedure_occurrence_id: i64,
    pub person_id: i64,
    pub procedure_concept_id: i64,
    pub date: NaiveDate,
    pub visit_occurrence_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub measurement_id: i64,
    pub person_id: i64,
    pub measurement_concept_id: i64,
    pub date: NaiveDate,
    pub value_as_number: f64,
    pub visit_occurrence_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub observation_id: i64,
    pub person_id: i64,
    pub observation_concept_id: i64,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Death {
    pub person_id: i64,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provider {
    pub provider_id: i64,
    pub provider_name: String,
    pub specialty: &'static str,
}

/// All generated rows, before loading into a database.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SyntheticOmop {
    pub persons: Vec<Person>,
    pub observation_periods: Vec<ObservationPeriod>,
    pub visits: Vec<Visit>,
    pub conditions: Vec<ConditionOccurrence>,
    pub drug_exposures: Vec<DrugExposure>,
    pub drug_eras: Vec<DrugEra>,
    pub procedures: Vec<ProcedureOccurrence>,
    pub measurements: Vec<Measurement>,
    pub observations: Vec<Observation>,
    pub deaths: Vec<Death>,
    pub providers: Vec<Provider>,
}

/// Days between consecutive exposures that still continue an era.
pub const ERA_PERSISTENCE_DAYS: i64 = 30;

const SPECIALTIES: [&str; 5] = [
    "Family Practice",
    "Internal Medicine",
    "Endocrinology",
    "Cardiology",
    "Nephrology",
];

/// Condition, prevalence, and how many extra occurrences on average.
const CONDITIONS: [(i64, f64, f64); 12] = [
    (vocab::T2DM, 0.32, 2.0),
    (vocab::T1DM, 0.05, 2.0),
    (vocab::HYPERTENSION, 0.35, 2.0),
    (vocab::CKD, 0.10, 1.0),
    (vocab::MI, 0.04, 0.2),
    (vocab::COPD, 0.07, 1.0),
    (vocab::ASTHMA, 0.08, 1.0),
    (vocab::HYPERLIPIDEMIA, 0.25, 1.0),
    (vocab::HEART_FAILURE, 0.04, 1.0),
    (vocab::CANCER, 0.05, 0.5),
    (vocab::DEPRESSION, 0.10, 1.0),
    (vocab::AFIB, 0.04, 1.0),
];

/// Treatment drug, indication (0 = anyone), uptake probability.
const TREATMENTS: [(i64, i64, f64); 14] = [
    (vocab::METFORMIN, vocab::T2DM, 0.75),
    (vocab::GLIPIZIDE, vocab::T2DM, 0.20),
    (vocab::SITAGLIPTIN, vocab::T2DM, 0.15),
    (vocab::LIRAGLUTIDE, vocab::T2DM, 0.10),
    (vocab::INSULIN, vocab::T2DM, 0.22),
    (vocab::INSULIN, vocab::T1DM, 0.95),
    (vocab::METFORMIN, 0, 0.02),
    (vocab::LISINOPRIL, vocab::HYPERTENSION, 0.55),
    (vocab::HCTZ, vocab::HYPERTENSION, 0.30),
    (vocab::ATORVASTATIN, vocab::HYPERLIPIDEMIA, 0.70),
    (vocab::WARFARIN, vocab::AFIB, 0.50),
    (vocab::ACETAMINOPHEN, 0, 0.20),
    (vocab::IBUPROFEN, 0, 0.15),
    (vocab::ASPIRIN, 0, 0.15),
];

fn days_between(a: NaiveDate, b: NaiveDate) -> i64 {
    (b - a).num_days()
}

fn uniform_date(rng: &mut ChaCha8Rng, lo: NaiveDate, hi: NaiveDate) -> NaiveDate {
    let span = days_between(lo, hi).max(0);
    lo + Duration::days(rng.random_range(0..=span))
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map_or(0, |p| p.sample(rng) as u64)
}

/// Merges one person's exposures to one drug into eras; exposures must be
/// sorted by start date.
pub fn eras_for(exposures: &[(NaiveDate, NaiveDate)]) -> Vec<(NaiveDate, NaiveDate, i64, i64)> {
    let mut eras: Vec<(NaiveDate, NaiveDate, i64, i64)> = Vec::new();
    for &(s, e) in exposures {
        match eras.last_mut() {
            Some(era) if days_between(era.1, s) <= ERA_PERSISTENCE_DAYS => {
                if s > era.1 {
                    era.3 += days_between(era.1, s);
                }
                era.1 = era.1.max(e);
                era.2 += 1;
            }
            _ => eras.push((s, e, 1, 0)),
        }
    }
    eras
}

struct Ids {
    next: [i64; 8],
}

impl Ids {
    fn take(&mut self, table: usize) -> i64 {
        self.next[table] += 1;
        self.next[table]
    }
}

const VISIT: usize = 0;
const COND: usize = 1;
const DRUG: usize = 2;
const PROC: usize = 3;
const MEAS: usize = 4;
const OBS: usize = 5;
const OBS_PERIOD: usize = 6;
const ERA: usize = 7;

pub fn generate(spec: &SyntheticDbSpec) -> Result<SyntheticOmop, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut db = SyntheticOmop::default();
    let mut ids = Ids { next: [0; 8] };

    let n_providers = (spec.n_persons / 100).max(1);
    for i in 0..n_providers {
        db.providers.push(Provider {
            provider_id: i as i64 + 1,
            provider_name: format!("Provider {:03}", i + 1),
            specialty: SPECIALTIES[i % SPECIALTIES.len()],
        });
    }

    let span = days_between(spec.start, spec.end);
    let r = spec.rates;
    for pid in 1..=spec.n_persons as i64 {
        let gender = if rng.random_bool(0.5) {
            vocab::MALE
        } else {
            vocab::FEMALE
        };
        let year_of_birth = rng.random_range(1930..=2010);
        let month = rng.random_range(1..=12);
        let day = rng.random_range(1..=28);
        let provider_id = rng.random_range(1..=n_providers as i64);
        db.persons.push(Person {
            person_id: pid,
            gender_concept_id: gender,
            year_of_birth,
            month_of_birth: month,
            day_of_birth: day,
            provider_id,
        });

        let birth = NaiveDate::from_ymd_opt(year_of_birth, month, day).expect("day <= 28");
        let obs_lo = spec.start.max(birth);
        let obs_start =
            uniform_date(&mut rng, obs_lo, spec.start + Duration::days(span * 3 / 5)).min(spec.end);
        let obs_end = uniform_date(
            &mut rng,
            (obs_start + Duration::days(180)).min(spec.end),
            spec.end,
        );
        db.observation_periods.push(ObservationPeriod {
            observation_period_id: ids.take(OBS_PERIOD),
            person_id: pid,
            start: obs_start,
            end: obs_end,
        });
        let years = days_between(obs_start, obs_end) as f64 / 365.25;

        // visits first so other events can point at them
        let first_visit = db.visits.len();
        let n_visits = poisson(&mut rng, r.visits_per_year * years).max(1);
        let mut visit_dates: Vec<NaiveDate> = (0..n_visits)
            .map(|_| uniform_date(&mut rng, obs_start, obs_end))
            .collect();
        visit_dates.sort();
        for d in visit_dates {
            let roll: f64 = rng.random();
            let (concept, length) = if roll < 0.80 {
                (vocab::OUTPATIENT, 0)
            } else if roll < 0.92 {
                (vocab::EMERGENCY, 0)
            } else {
                (vocab::INPATIENT, rng.random_range(1..=7))
            };
            db.visits.push(Visit {
                visit_occurrence_id: ids.take(VISIT),
                person_id: pid,
                visit_concept_id: concept,
                start: d,
                end: (d + Duration::days(length)).min(obs_end),
                provider_id: if rng.random_bool(0.7) {
                    provider_id
                } else {
                    rng.random_range(1..=n_providers as i64)
                },
            });
        }
        let visits: Vec<(i64, NaiveDate, i64)> = db.visits[first_visit..]
            .iter()
            .map(|v| (v.visit_occurrence_id, v.start, v.visit_concept_id))
            .collect();
        let visit_on = |d: NaiveDate| visits.iter().find(|v| v.1 == d).map(|v| v.0);

        let mut onsets: Vec<(i64, NaiveDate)> = Vec::new();
        for &(concept, prevalence, extra) in &CONDITIONS {
            if !rng.random_bool((prevalence * r.condition_scale).min(1.0)) {
                continue;
            }
            let onset = uniform_date(&mut rng, obs_start, obs_end);
            onsets.push((concept, onset));
            let mut dates = vec![onset];
            for _ in 0..poisson(&mut rng, extra) {
                dates.push(uniform_date(&mut rng, onset, obs_end));
            }
            dates.sort();
            for d in dates {
                let end = rng
                    .random_bool(0.5)
                    .then(|| (d + Duration::days(rng.random_range(0..=30))).min(obs_end));
                db.conditions.push(ConditionOccurrence {
                    condition_occurrence_id: ids.take(COND),
                    person_id: pid,
                    condition_concept_id: concept,
                    start: d,
                    end,
                    visit_occurrence_id: visit_on(d),
                });
            }
        }
        let onset_of = |c: i64| onsets.iter().find(|o| o.0 == c).map(|o| o.1);

        let mut person_exposures: Vec<(i64, NaiveDate, NaiveDate)> = Vec::new();
        for &(drug, indication, uptake) in &TREATMENTS {
            let anchor = if indication == 0 {
                Some(uniform_date(&mut rng, obs_start, obs_end))
            } else {
                onset_of(indication)
            };
            let Some(anchor) = anchor else { continue };
            if person_exposures.iter().any(|e| e.0 == drug) {
                continue;
            }
            if !rng.random_bool((uptake * r.treatment_scale).min(1.0)) {
                continue;
            }
            // most treatment starts after diagnosis; some precede the coded diagnosis
            let lead: i64 = rng.random_range(-60..=400);
            let mut start = anchor + Duration::days(lead);
            if start < obs_start {
                start = obs_start;
            }
            for _ in 0..1 + poisson(&mut rng, 4.0) {
                if start > obs_end {
                    break;
                }
                let supply: i64 = if rng.random_bool(0.8) { 30 } else { 90 };
                let end = start + Duration::days(supply - 1);
                person_exposures.push((drug, start, end));
                start = end + Duration::days(rng.random_range(1..=75));
            }
        }
        person_exposures.sort_by_key(|e| (e.1, e.0));
        for &(drug, s, e) in &person_exposures {
            db.drug_exposures.push(DrugExposure {
                drug_exposure_id: ids.take(DRUG),
                person_id: pid,
                drug_concept_id: drug,
                start: s,
                end: e,
                days_supply: days_between(s, e) + 1,
            });
        }
        let mut drugs: Vec<i64> = person_exposures.iter().map(|e| e.0).collect();
        drugs.sort_unstable();
        drugs.dedup();
        for drug in drugs {
            let spans: Vec<(NaiveDate, NaiveDate)> = person_exposures
                .iter()
                .filter(|e| e.0 == drug)
                .map(|e| (e.1, e.2))
                .collect();
            for (s, e, count, gap) in eras_for(&spans) {
                db.drug_eras.push(DrugEra {
                    drug_era_id: ids.take(ERA),
                    person_id: pid,
                    drug_concept_id: drug,
                    start: s,
                    end: e,
                    drug_exposure_count: count,
                    gap_days: gap,
                });
            }
        }

        let mut procs: Vec<(i64, NaiveDate)> = Vec::new();
        if let Some(d) = onset_of(vocab::CKD) {
            if rng.random_bool(0.2) {
                procs.push((vocab::HEMODIALYSIS, uniform_date(&mut rng, d, obs_end)));
            }
        }
        if let Some(d) = onset_of(vocab::MI) {
            if rng.random_bool(0.5) {
                procs.push((vocab::PCI, d));
            }
        }
        if rng.random_bool(0.1) {
            procs.push((
                vocab::COLONOSCOPY,
                uniform_date(&mut rng, obs_start, obs_end),
            ));
        }
        for &(_, d, concept) in &visits {
            if concept != vocab::OUTPATIENT && rng.random_bool(0.5) {
                procs.push((vocab::ECG, d));
            }
        }
        procs.sort_by_key(|p| (p.1, p.0));
        for (concept, d) in procs {
            db.procedures.push(ProcedureOccurrence {
                procedure_occurrence_id: ids.take(PROC),
                person_id: pid,
                procedure_concept_id: concept,
                date: d,
                visit_occurrence_id: visit_on(d),
            });
        }

        let diabetic = onset_of(vocab::T2DM).is_some() || onset_of(vocab::T1DM).is_some();
        let renal = onset_of(vocab::CKD).is_some();
        let base_weight = rng.random_range(50.0..110.0_f64);
        for &(vid, d, concept) in &visits {
            if concept != vocab::OUTPATIENT {
                continue;
            }
            let mut add = |c: i64, v: f64| {
                db.measurements.push(Measurement {
                    measurement_id: ids.take(MEAS),
                    person_id: pid,
                    measurement_concept_id: c,
                    date: d,
                    value_as_number: (v * 10.0).round() / 10.0,
                    visit_occurrence_id: Some(vid),
                });
            };
            if rng.random_bool(r.measurement_prob.min(1.0)) {
                let v = if diabetic {
                    rng.random_range(6.0..11.5)
                } else {
                    rng.random_range(4.5..6.2)
                };
                add(vocab::HBA1C, v);
            }
            if rng.random_bool(r.measurement_prob.min(1.0)) {
                let v = if renal {
                    rng.random_range(1.4..4.0)
                } else {
                    rng.random_range(0.6..1.3)
                };
                add(vocab::CREATININE, v);
            }
            if rng.random_bool(r.measurement_prob.min(1.0)) {
                let w = base_weight + rng.random_range(-3.0..3.0);
                add(vocab::BODY_WEIGHT, w);
            }
        }

        if rng.random_bool(0.2) {
            db.observations.push(Observation {
                observation_id: ids.take(OBS),
                person_id: pid,
                observation_concept_id: vocab::TOBACCO,
                date: obs_start,
            });
        }
        if rng.random_bool(0.03) {
            db.deaths.push(Death {
                person_id: pid,
                date: obs_end,
            });
        }
    }
    Ok(db)
}

pub const SCHEMA: &str = "
CREATE TABLE concept (
  concept_id INTEGER PRIMARY KEY,
  concept_name TEXT NOT NULL,
  domain_id TEXT NOT NULL,
  vocabulary_id TEXT NOT NULL
);
CREATE TABLE provider (
  provider_id INTEGER PRIMARY KEY,
  provider_name TEXT NOT NULL,
  specialty_source_value TEXT
);
CREATE TABLE person (
  person_id INTEGER PRIMARY KEY,
  gender_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  year_of_birth INTEGER NOT NULL,
  month_of_birth INTEGER,
  day_of_birth INTEGER,
  race_concept_id INTEGER NOT NULL DEFAULT 0,
  ethnicity_concept_id INTEGER NOT NULL DEFAULT 0,
  provider_id INTEGER REFERENCES provider(provider_id)
);
CREATE TABLE observation_period (
  observation_period_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  observation_period_start_date TEXT NOT NULL,
  observation_period_end_date TEXT NOT NULL
);
CREATE TABLE visit_occurrence (
  visit_occurrence_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  visit_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  visit_start_date TEXT NOT NULL,
  visit_end_date TEXT NOT NULL,
  provider_id INTEGER REFERENCES provider(provider_id)
);
CREATE TABLE condition_occurrence (
  condition_occurrence_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  condition_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  condition_start_date TEXT NOT NULL,
  condition_end_date TEXT,
  visit_occurrence_id INTEGER REFERENCES visit_occurrence(visit_occurrence_id)
);
CREATE TABLE drug_exposure (
  drug_exposure_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  drug_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  drug_exposure_start_date TEXT NOT NULL,
  drug_exposure_end_date TEXT NOT NULL,
  days_supply INTEGER
);
CREATE TABLE drug_era (
  drug_era_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  drug_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  drug_era_start_date TEXT NOT NULL,
  drug_era_end_date TEXT NOT NULL,
  drug_exposure_count INTEGER NOT NULL,
  gap_days INTEGER NOT NULL
);
CREATE TABLE procedure_occurrence (
  procedure_occurrence_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  procedure_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  procedure_date TEXT NOT NULL,
  visit_occurrence_id INTEGER REFERENCES visit_occurrence(visit_occurrence_id)
);
CREATE TABLE measurement (
  measurement_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  measurement_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  measurement_date TEXT NOT NULL,
  value_as_number REAL,
  visit_occurrence_id INTEGER REFERENCES visit_occurrence(visit_occurrence_id)
);
CREATE TABLE observation (
  observation_id INTEGER PRIMARY KEY,
  person_id INTEGER NOT NULL REFERENCES person(person_id),
  observation_concept_id INTEGER NOT NULL REFERENCES concept(concept_id),
  observation_date TEXT NOT NULL
);
CREATE TABLE death (
  person_id INTEGER PRIMARY KEY REFERENCES person(person_id),
  death_date TEXT NOT NULL
);
CREATE INDEX idx_op_person ON observation_period(person_id);
CREATE INDEX idx_visit_person ON visit_occurrence(person_id);
CREATE INDEX idx_cond_person ON condition_occurrence(person_id, condition_concept_id);
CREATE INDEX idx_drug_person ON drug_exposure(person_id, drug_concept_id);
CREATE INDEX idx_era_person ON drug_era(person_id, drug_concept_id);
CREATE INDEX idx_proc_person ON procedure_occurrence(person_id);
CREATE INDEX idx_meas_person ON measurement(person_id);
";

/// Tables created by [`SCHEMA`], in load order.
pub const TABLES: [&str; 12] = [
    "concept",
    "provider",
    "person",
    "observation_period",
    "visit_occurrence",
    "condition_occurrence",
    "drug_exposure",
    "drug_era",
    "procedure_occurrence",
    "measurement",
    "observation",
    "death",
];

fn iso(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

impl SyntheticOmop {
    /// Creates the schema on `conn` and inserts every row.
    pub fn load(&self, conn: &Connection) -> rusqlite::Result<()> {
        conn.execute_batch("PRAGMA foreign_keys = ON;")?;
        conn.execute_batch(SCHEMA)?;
        let tx = conn.unchecked_transaction()?;
        {
            let mut st = tx.prepare("INSERT INTO concept VALUES (?1, ?2, ?3, ?4)")?;
            for c in CONCEPTS {
                st.execute(params![c.concept_id, c.name, c.domain_id, c.vocabulary_id])?;
            }
            let mut st = tx.prepare("INSERT INTO provider VALUES (?1, ?2, ?3)")?;
            for p in &self.providers {
                st.execute(params![p.provider_id, p.provider_name, p.specialty])?;
            }
            let mut st = tx.prepare(
                "INSERT INTO person (person_id, gender_concept_id, year_of_birth, month_of_birth, day_of_birth, provider_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for p in &self.persons {
                st.execute(params![
                    p.person_id,
                    p.gender_concept_id,
                    p.year_of_birth,
                    p.month_of_birth,
                    p.day_of_birth,
                    p.provider_id
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO observation_period VALUES (?1, ?2, ?3, ?4)")?;
            for o in &self.observation_periods {
                st.execute(params![
                    o.observation_period_id,
                    o.person_id,
                    iso(o.start),
                    iso(o.end)
                ])?;
            }
            let mut st =
                tx.prepare("INSERT INTO visit_occurrence VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            for v in &self.visits {
                st.execute(params![
                    v.visit_occurrence_id,
                    v.person_id,
                    v.visit_concept_id,
                    iso(v.start),
                    iso(v.end),
                    v.provider_id
                ])?;
            }
            let mut st =
                tx.prepare("INSERT INTO condition_occurrence VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            for c in &self.conditions {
                st.execute(params![
                    c.condition_occurrence_id,
                    c.person_id,
                    c.condition_concept_id,
                    iso(c.start),
                    c.end.map(iso),
                    c.visit_occurrence_id
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO drug_exposure VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            for d in &self.drug_exposures {
                st.execute(params![
                    d.drug_exposure_id,
                    d.person_id,
                    d.drug_concept_id,
                    iso(d.start),
                    iso(d.end),
                    d.days_supply
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO drug_era VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)")?;
            for e in &self.drug_eras {
                st.execute(params![
                    e.drug_era_id,
                    e.person_id,
                    e.drug_concept_id,
                    iso(e.start),
                    iso(e.end),
                    e.drug_exposure_count,
                    e.gap_days
                ])?;
            }
            let mut st =
                tx.prepare("INSERT INTO procedure_occurrence VALUES (?1, ?2, ?3, ?4, ?5)")?;
            for p in &self.procedures {
                st.execute(params![
                    p.procedure_occurrence_id,
                    p.person_id,
                    p.procedure_concept_id,
                    iso(p.date),
                    p.visit_occurrence_id
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO measurement VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            for m in &self.measurements {
                st.execute(params![
                    m.measurement_id,
                    m.person_id,
                    m.measurement_concept_id,
                    iso(m.date),
                    m.value_as_number,
                    m.visit_occurrence_id
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO observation VALUES (?1, ?2, ?3, ?4)")?;
            for o in &self.observations {
                st.execute(params![
                    o.observation_id,
                    o.person_id,
                    o.observation_concept_id,
                    iso(o.date)
                ])?;
            }
            let mut st = tx.prepare("INSERT INTO death VALUES (?1, ?2)")?;
            for d in &self.deaths {
                st.execute(params![d.person_id, iso(d.date)])?;
            }
        }
        tx.commit()
    }

    pub fn into_backend(&self) -> Result<SqliteBackend, ExecError> {
        let backend = SqliteBackend::in_memory()?;
        let conn = backend.connect()?;
        self.load(&conn).map_err(|e| ExecError::Unavailable {
            message: format!("loading synthetic data: {e}"),
        })?;
        Ok(backend)
    }
}

/// Generates and loads a database in one step.
pub fn generate_synthetic_omop(
    spec: &SyntheticDbSpec,
) -> Result<(SyntheticOmop, SqliteBackend), SynthError> {
    let db = generate(spec)?;
    let backend = db.into_backend()?;
    Ok((db, backend))
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Backend(#[from] ExecError),
}

/// Every table's rows as text, ordered by primary key. Two databases with
/// equal dumps have identical contents.
pub fn dump_tables(conn: &Connection) -> rusqlite::Result<String> {
    let mut out = String::new();
    for table in TABLES {
        let _ = writeln!(out, "## {table}");
        let mut st = conn.prepare(&format!("SELECT * FROM {table} ORDER BY 1"))?;
        let n = st.column_count();
        let mut rows = st.query([])?;
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(n);
            for i in 0..n {
                let v: rusqlite::types::Value = row.get(i)?;
                cells.push(format!("{v:?}"));
            }
            let _ = writeln!(out, "{}", cells.join("|"));
        }
    }
    Ok(out)
}

/// Age in whole years on `on`, from year/month/day of birth.
pub fn age_on(p: &Person, on: NaiveDate) -> i32 {
    let mut age = on.year() - p.year_of_birth;
    if (on.month(), on.day()) < (p.month_of_birth, p.day_of_birth) {
        age -= 1;
    }
    age
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn era_merging() {
        let exp = [
            (d("2020-01-01"), d("2020-01-30")),
            (d("2020-02-15"), d("2020-03-15")),
            (d("2020-05-01"), d("2020-05-30")),
        ];
        let eras = eras_for(&exp);
        assert_eq!(eras.len(), 2);
        assert_eq!(eras[0], (d("2020-01-01"), d("2020-03-15"), 2, 16));
        assert_eq!(eras[1].2, 1);
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticDbSpec {
            n_persons: 0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(SpecError::NoPersons));
        let bad = SyntheticDbSpec {
            start: d("2020-01-01"),
            end: d("2019-01-01"),
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SpecError::DateRange { .. })));
    }

    #[test]
    fn person_count_and_ids() {
        let db = generate(&SyntheticDbSpec {
            n_persons: 100,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(db.persons.len(), 100);
        assert_eq!(db.observation_periods.len(), 100);
    }

    #[test]
    fn age_respects_birthday() {
        let p = Person {
            person_id: 1,
            gender_concept_id: 0,
            year_of_birth: 2000,
            month_of_birth: 6,
            day_of_birth: 15,
            provider_id: 1,
        };
        assert_eq!(age_on(&p, d("2018-06-14")), 17);
        assert_eq!(age_on(&p, d("2018-06-15")), 18);
    }
}
