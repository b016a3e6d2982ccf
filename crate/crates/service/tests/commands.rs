use std::path::{Path, PathBuf};

use cohort_core::cohort::Cohort;
use cohort_core::generation::Strategy;
use cohort_core::kb::KbKind;
use cohort_service::commands::{self, CliError, EvaluateArgs, GenerateArgs, SynthArgs};
use cohort_service::config::AppConfig;
use cohort_service::context::AppContext;
use cohort_service::run::{CriteriaInput, FunnelOutput, COHORT_FILE, FUNNEL_FILE, SQL_FILE};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn demo_config() -> AppConfig {
    let mut cfg = AppConfig::load(data_dir().join("config/demo.toml")).unwrap();
    cfg.backend = cohort_service::config::BackendConfig::Synthetic {
        seed: 3,
        persons: 300,
    };
    cfg
}

fn criteria_file() -> PathBuf {
    data_dir().join("fixtures/t2dm_metformin/criteria.txt")
}

#[test]
fn demo_config_loads_with_resolved_paths() {
    let cfg = AppConfig::load(data_dir().join("config/demo.toml")).unwrap();
    assert!(cfg.kb.ask.unwrap().exists());
    assert!(cfg.kb.coho.unwrap().exists());
    assert!(cfg.vocab.concepts.unwrap().exists());
}

#[test]
fn generate_writes_cohort_funnel_and_sql() {
    let ctx = AppContext::build(demo_config()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = commands::generate(
        &ctx,
        &GenerateArgs {
            criteria: criteria_file(),
            out_dir: out.path().to_path_buf(),
            strategy: Some(Strategy::RagC),
            funnel_only: false,
        },
    )
    .unwrap();
    assert_eq!(r.written.len(), 3);
    let cohort =
        Cohort::read_csv(std::fs::File::open(out.path().join(COHORT_FILE)).unwrap()).unwrap();
    assert_eq!(cohort, r.outputs.cohort);
    let funnel: FunnelOutput =
        serde_json::from_slice(&std::fs::read(out.path().join(FUNNEL_FILE)).unwrap()).unwrap();
    funnel.document().check().unwrap();
    assert_eq!(funnel.steps.len(), 8);
    assert_eq!(funnel.final_count, cohort.len());
    assert_eq!(funnel.funnel_similarity, Some(1.0));
    let sql: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join(SQL_FILE)).unwrap()).unwrap();
    assert_eq!(sql["queries"].as_array().unwrap().len(), 9);
}

#[test]
fn funnel_only_uses_the_final_step_as_cohort() {
    let ctx = AppContext::build(demo_config()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = commands::generate(
        &ctx,
        &GenerateArgs {
            criteria: criteria_file(),
            out_dir: out.path().to_path_buf(),
            strategy: None,
            funnel_only: true,
        },
    )
    .unwrap();
    let f = r.outputs.funnel.unwrap();
    assert_eq!(f.final_count, r.outputs.cohort.len());
    assert_eq!(f.funnel_similarity, None);
    assert_eq!(r.outputs.sql.queries[0].step_id, "index");
}

#[test]
fn criteria_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "  \n").unwrap();
    assert!(matches!(
        commands::read_criteria(&empty),
        Err(CliError::Input(_))
    ));

    let json = dir.path().join("c.json");
    std::fs::write(
        &json,
        r#"{"index_date_rule": "first metformin exposure", "inclusion": [{"id": "inc-1", "text": "adult"}]}"#,
    )
    .unwrap();
    assert!(matches!(
        commands::read_criteria(&json).unwrap(),
        CriteriaInput::Structured(_)
    ));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"index_date_rule": "x", "inclusion": []}"#).unwrap();
    assert!(matches!(
        commands::read_criteria(&bad),
        Err(CliError::Input(_))
    ));

    assert!(matches!(
        commands::read_criteria(Path::new("/nonexistent/c.txt")),
        Err(CliError::Io { .. })
    ));
}

#[test]
fn evaluate_reports_every_strategy() {
    let report = commands::evaluate(
        demo_config(),
        &EvaluateArgs {
            kb_ask: None,
            kb_coho: None,
            backend: None,
            strategies: vec![Strategy::Zs, Strategy::RagAc],
            leave_one_out: true,
            window_days: Some(30),
        },
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].strategy, Strategy::Zs);
    for row in &report.rows {
        assert!(row.n_samples > 0);
        // the fixture transcript answers every sample with one valid query
        assert_eq!(row.valid_sql, 100.0);
        for v in [
            row.f1,
            row.precision,
            row.recall,
            row.size_similarity,
            row.date_overlap,
            row.within_window,
        ] {
            assert!((0.0..=100.0).contains(&v));
        }
    }
    assert!(report.render_table().contains("Within 30d"));
}

#[test]
fn evaluate_with_missing_backend_file_fails_before_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let backend = dir.path().join("backend.toml");
    std::fs::write(&backend, "kind = \"sqlite\"\npath = \"missing.db\"\n").unwrap();
    let err = commands::evaluate(
        demo_config(),
        &EvaluateArgs {
            kb_ask: None,
            kb_coho: None,
            backend: Some(backend),
            strategies: vec![Strategy::Zs],
            leave_one_out: true,
            window_days: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Setup(_)), "{err}");
    assert!(err.to_string().contains("missing.db"));
}

#[test]
fn evaluate_needs_a_criteria_kb() {
    let mut cfg = demo_config();
    cfg.kb.coho = None;
    let err = commands::evaluate(
        cfg,
        &EvaluateArgs {
            kb_ask: None,
            kb_coho: None,
            backend: None,
            strategies: vec![Strategy::Zs],
            leave_one_out: false,
            window_days: None,
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("--kb-coho"));
}

#[test]
fn kb_stats_command() {
    let s = commands::kb_stats_for(&data_dir().join("kb/sample_coho.jsonl"), KbKind::Coho).unwrap();
    assert_eq!(s.n_samples, 12);
    assert!(s.excluded.is_empty());
    assert!(commands::kb_stats_for(Path::new("/nonexistent.jsonl"), KbKind::Ask).is_err());
}

#[test]
fn synth_writes_a_database_that_serves_as_backend() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("omop.db");
    let vocab = dir.path().join("vocab");
    let args = SynthArgs {
        out: db.clone(),
        seed: 5,
        persons: 120,
        vocab_dir: Some(vocab.clone()),
    };
    let written = commands::synth(&args).unwrap();
    assert_eq!(written.len(), 3);
    assert!(matches!(commands::synth(&args), Err(CliError::Input(_))));

    let mut cfg = demo_config();
    cfg.backend = cohort_service::config::BackendConfig::Sqlite {
        path: db,
        dialect: cohort_core::sql_complexity::SqlDialect::Sqlite,
        credential_env: None,
    };
    cfg.vocab.concepts = Some(vocab.join("CONCEPT.tsv"));
    cfg.vocab.synonyms = Some(vocab.join("CONCEPT_SYNONYM.tsv"));
    let ctx = AppContext::build(cfg).unwrap();
    let rows =
        cohort_core::backend::SqlExecutor::execute(&ctx.backend, "SELECT COUNT(*) FROM person")
            .unwrap();
    assert_eq!(
        rows.rows[0][0],
        cohort_core::backend::SqlValue::Integer(120)
    );
}

#[test]
fn missing_credential_variable_is_a_setup_error() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("omop.db");
    commands::synth(&SynthArgs {
        out: db.clone(),
        seed: 1,
        persons: 10,
        vocab_dir: None,
    })
    .unwrap();
    let mut cfg = demo_config();
    cfg.backend = cohort_service::config::BackendConfig::Sqlite {
        path: db,
        dialect: cohort_core::sql_complexity::SqlDialect::Sqlite,
        credential_env: Some("COHORT_TEST_SURELY_UNSET_VAR".into()),
    };
    let err = AppContext::build(cfg).err().unwrap();
    assert!(err.to_string().contains("COHORT_TEST_SURELY_UNSET_VAR"));
}
