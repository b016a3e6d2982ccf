use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::*;

use cohort_core::backend::{ExecError, SqlExecutor};
use cohort_engine::synth::{dump_tables, generate, SyntheticDbSpec, SyntheticOmop, TABLES};

fn small(seed: u64, n: usize) -> SyntheticDbSpec {
    SyntheticDbSpec {
        seed,
        n_persons: n,
        ..SyntheticDbSpec::default()
    }
}

fn dump(spec: &SyntheticDbSpec) -> String {
    let backend = generate(spec).unwrap().into_backend().unwrap();
    dump_tables(&backend.connect().unwrap()).unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let a = dump(&small(7, 150));
    let b = dump(&small(7, 150));
    assert_eq!(a, b);
    assert_ne!(a, dump(&small(8, 150)));
}

#[test]
fn requested_person_count() {
    let backend = generate(&small(1, 100)).unwrap().into_backend().unwrap();
    let rs = backend.execute("SELECT COUNT(*) AS n FROM person").unwrap();
    assert_eq!(rs.rows[0][0], cohort_core::backend::SqlValue::Integer(100));
}

#[test]
fn every_table_exists_and_core_tables_are_populated() {
    let backend = generate(&small(3, 300)).unwrap().into_backend().unwrap();
    for t in TABLES {
        let rs = backend
            .execute(&format!("SELECT COUNT(*) FROM {t}"))
            .unwrap();
        let cohort_core::backend::SqlValue::Integer(n) = rs.rows[0][0] else {
            panic!()
        };
        if t != "death" && t != "observation" {
            assert!(n > 0, "{t} is empty");
        }
    }
}

/// Row-level scan of every foreign key, independent of SQLite's own checks.
fn integrity_violations(db: &SyntheticOmop) -> Vec<String> {
    let persons: BTreeSet<i64> = db.persons.iter().map(|p| p.person_id).collect();
    let providers: BTreeSet<i64> = db.providers.iter().map(|p| p.provider_id).collect();
    let visits: BTreeMap<i64, i64> = db
        .visits
        .iter()
        .map(|v| (v.visit_occurrence_id, v.person_id))
        .collect();
    let concepts: BTreeSet<i64> = cohort_engine::vocab::CONCEPTS
        .iter()
        .map(|c| c.concept_id)
        .collect();
    let periods: BTreeMap<i64, (NaiveDate, NaiveDate)> = db
        .observation_periods
        .iter()
        .map(|o| (o.person_id, (o.start, o.end)))
        .collect();
    let mut bad = Vec::new();
    let mut check = |what: &str,
                     pid: i64,
                     concept: Option<i64>,
                     visit: Option<i64>,
                     date: Option<NaiveDate>| {
        if !persons.contains(&pid) {
            bad.push(format!("{what}: person {pid}"));
        }
        if let Some(c) = concept {
            if !concepts.contains(&c) {
                bad.push(format!("{what}: concept {c}"));
            }
        }
        if let Some(v) = visit {
            if visits.get(&v) != Some(&pid) {
                bad.push(format!("{what}: visit {v}"));
            }
        }
        if let Some(d) = date {
            let (s, e) = periods[&pid];
            if d < s || d > e {
                bad.push(format!("{what}: date {d} outside observation"));
            }
        }
    };
    for p in &db.persons {
        check("person", p.person_id, Some(p.gender_concept_id), None, None);
    }
    for v in &db.visits {
        check(
            "visit",
            v.person_id,
            Some(v.visit_concept_id),
            None,
            Some(v.start),
        );
    }
    for c in &db.conditions {
        check(
            "condition",
            c.person_id,
            Some(c.condition_concept_id),
            c.visit_occurrence_id,
            Some(c.start),
        );
    }
    for d in &db.drug_exposures {
        check(
            "drug",
            d.person_id,
            Some(d.drug_concept_id),
            None,
            Some(d.start),
        );
    }
    for e in &db.drug_eras {
        check(
            "era",
            e.person_id,
            Some(e.drug_concept_id),
            None,
            Some(e.start),
        );
    }
    for p in &db.procedures {
        check(
            "procedure",
            p.person_id,
            Some(p.procedure_concept_id),
            p.visit_occurrence_id,
            Some(p.date),
        );
    }
    for m in &db.measurements {
        check(
            "measurement",
            m.person_id,
            Some(m.measurement_concept_id),
            m.visit_occurrence_id,
            Some(m.date),
        );
    }
    for o in &db.observations {
        check(
            "observation",
            o.person_id,
            Some(o.observation_concept_id),
            None,
            Some(o.date),
        );
    }
    for d in &db.deaths {
        check("death", d.person_id, None, None, Some(d.date));
    }
    for p in &db.persons {
        if !providers.contains(&p.provider_id) {
            bad.push(format!(
                "person {}: provider {}",
                p.person_id, p.provider_id
            ));
        }
    }
    for v in &db.visits {
        if !providers.contains(&v.provider_id) {
            bad.push(format!(
                "visit {}: provider {}",
                v.visit_occurrence_id, v.provider_id
            ));
        }
    }
    bad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn referential_integrity(seed in any::<u64>(), n in 1usize..200) {
        let db = generate(&small(seed, n)).unwrap();
        let bad = integrity_violations(&db);
        prop_assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
        let backend = db.into_backend().unwrap();
        let fk = backend.execute("PRAGMA foreign_key_check").unwrap();
        prop_assert!(fk.rows.is_empty());
    }
}

#[test]
fn eras_cover_their_exposures() {
    let db = generate(&small(11, 200)).unwrap();
    for e in &db.drug_exposures {
        assert!(db.drug_eras.iter().any(|r| r.person_id == e.person_id
            && r.drug_concept_id == e.drug_concept_id
            && r.start <= e.start
            && r.end >= e.end));
    }
    let total: i64 = db.drug_eras.iter().map(|r| r.drug_exposure_count).sum();
    assert_eq!(total as usize, db.drug_exposures.len());
}

#[test]
fn first_condition_date_matches_generated_rows() {
    let db = generate(&small(5, 400)).unwrap();
    let mut expected: BTreeMap<i64, NaiveDate> = BTreeMap::new();
    for c in &db.conditions {
        let d = expected.entry(c.person_id).or_insert(c.start);
        *d = (*d).min(c.start);
    }
    let backend = db.into_backend().unwrap();
    let sql = "SELECT person_id, MIN(condition_start_date) AS index_date FROM condition_occurrence GROUP BY person_id";
    let first = backend.execute(sql).unwrap().to_cohort().unwrap();
    let again = backend.execute(sql).unwrap().to_cohort().unwrap();
    assert_eq!(first, again);
    let got: BTreeMap<i64, NaiveDate> = first.iter().collect();
    assert_eq!(got, expected);
}

#[test]
fn syntax_errors_and_empty_results() {
    let backend = generate(&small(2, 20)).unwrap().into_backend().unwrap();
    let err = backend.execute("SELECT FROMM x").unwrap_err();
    assert!(matches!(err, ExecError::Compile { .. }), "{err:?}");
    let rs = backend
        .execute("SELECT person_id FROM death WHERE 1 = 0")
        .unwrap();
    assert!(rs.rows.is_empty());
    assert!(rs.to_cohort().is_err() || rs.to_cohort().unwrap().is_empty());
}
