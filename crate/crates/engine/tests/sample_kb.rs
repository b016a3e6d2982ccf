use std::path::PathBuf;
use std::sync::Arc;

use cohort_core::embedding::{Embedder, HashingEmbedder};
use cohort_core::generation::Strategy;
use cohort_core::kb::{load_kb, KbKind};
use cohort_core::llm::{LlmProvider, LlmRequest, MockLlm, ProviderError, Transcript};
use cohort_core::metrics::EvalConfig;
use cohort_core::normalize::{build_vocab_index, load_vocabulary, VocabIndex};
use cohort_core::retrieval::IndexedKb;
use cohort_core::sql_complexity::analyze_sql;
use cohort_engine::eval::{reference_cohort, run_eval, samples_from_kb, EvalError, EvalSample};
use cohort_engine::pipeline::{PipelineConfig, Resources};
use cohort_engine::sqlite::SqliteBackend;
use cohort_engine::synth::{generate, SyntheticDbSpec};
use cohort_engine::vocab::{concept_records, concept_tsv, dictionary_detector, synonym_tsv};

fn data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn vocabulary_files_match_generator() {
    let dir = data().join("vocab");
    if std::env::var_os("UPDATE_FIXTURES").is_some() {
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("CONCEPT.tsv"), concept_tsv()).unwrap();
        std::fs::write(dir.join("CONCEPT_SYNONYM.tsv"), synonym_tsv()).unwrap();
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("CONCEPT.tsv")).unwrap(),
        concept_tsv()
    );
    assert_eq!(
        std::fs::read_to_string(dir.join("CONCEPT_SYNONYM.tsv")).unwrap(),
        synonym_tsv()
    );
    let loaded = load_vocabulary(
        dir.join("CONCEPT.tsv"),
        Some(&dir.join("CONCEPT_SYNONYM.tsv")),
    )
    .unwrap();
    assert_eq!(loaded.concepts, concept_records());
    assert_eq!(loaded.skipped_domains.get("Gender"), Some(&2));
}

struct World {
    backend: SqliteBackend,
    embedder: Arc<dyn Embedder>,
    vocab: VocabIndex,
    ask: IndexedKb,
    coho: IndexedKb,
}

fn world() -> World {
    let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
    let vocab_embedder: Arc<dyn Embedder> =
        Arc::new(HashingEmbedder::default().with_char_ngrams(3));
    let ask = load_kb(data().join("kb/sample_ask.jsonl"), KbKind::Ask).unwrap();
    let coho = load_kb(data().join("kb/sample_coho.jsonl"), KbKind::Coho).unwrap();
    World {
        backend: generate(&SyntheticDbSpec::default())
            .unwrap()
            .into_backend()
            .unwrap(),
        vocab: build_vocab_index(concept_records(), vocab_embedder).unwrap(),
        ask: IndexedKb::build(KbKind::Ask, ask, embedder.as_ref()).unwrap(),
        coho: IndexedKb::build(KbKind::Coho, coho, embedder.as_ref()).unwrap(),
        embedder,
    }
}

fn resources<'a>(w: &'a World, llm: &'a dyn LlmProvider) -> Resources<'a> {
    Resources {
        llm,
        embedder: w.embedder.as_ref(),
        ask: Some(&w.ask),
        coho: Some(&w.coho),
        vocab: &w.vocab,
        verifier: None,
        detector: None,
        executor: &w.backend,
    }
}

#[test]
fn sample_entries_analyze_and_execute() {
    let w = world();
    let llm = MockLlm::new(Transcript::default());
    let res = resources(&w, &llm);
    for e in w.ask.entries.iter().chain(&w.coho.entries) {
        analyze_sql(&e.sql).unwrap_or_else(|err| panic!("{}: {err}", e.id));
    }
    for e in &w.coho.entries {
        let cohort = reference_cohort(&e.sql, &res, &Default::default())
            .unwrap_or_else(|err| panic!("{}: {err:?}", e.id));
        assert!(!cohort.is_empty(), "{} selects nobody", e.id);
    }
    let (samples, skipped) = samples_from_kb(&w.coho.entries, Some(&dictionary_detector()));
    assert_eq!(samples.len(), 12);
    assert!(skipped.is_empty());
}

/// Answers every cohort prompt with the reference SQL of the sample whose
/// index rule appears in it; `broken` samples get unrepairable SQL.
struct AnswerKey {
    samples: Vec<EvalSample>,
    broken: Vec<String>,
}

impl LlmProvider for AnswerKey {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let text = request.full_text();
        if text.contains("### Repair") {
            return Ok("SELECT broken FROM nowhere".into());
        }
        let task = text
            .split("### Task: full cohort query")
            .nth(1)
            .unwrap_or("");
        for s in &self.samples {
            if task.contains(&format!("Index date: {}\n", s.criteria.index_date_rule)) {
                if self.broken.contains(&s.id) {
                    return Ok("SELECT broken FROM nowhere".into());
                }
                return Ok(format!("```sql\n{}\n```", s.reference_sql));
            }
        }
        Err(ProviderError::fatal("answer-key", "unknown prompt"))
    }
}

#[test]
fn perfect_answers_score_one_hundred_everywhere() {
    let w = world();
    let (samples, _) = samples_from_kb(&w.coho.entries, Some(&dictionary_detector()));
    let key = AnswerKey {
        samples: samples.clone(),
        broken: vec![],
    };
    let res = resources(&w, &key);
    let report = run_eval(
        &samples,
        &res,
        &PipelineConfig::default(),
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        for v in [
            row.valid_sql,
            row.retrieved,
            row.f1,
            row.precision,
            row.recall,
            row.size_similarity,
            row.date_overlap,
            row.within_window,
        ] {
            assert!((v - 100.0).abs() < 1e-9, "{row:?}");
        }
    }
    let table = report.render_table();
    for h in [
        "Valid SQL",
        "Retrieved",
        "F1",
        "Prec.",
        "Recall",
        "Size sim.",
        "Date overlap",
        "Within 30d",
    ] {
        assert!(table.contains(h));
    }
}

#[test]
fn failures_pull_means_down_as_zeros() {
    let w = world();
    let (samples, _) = samples_from_kb(&w.coho.entries, None);
    let broken: Vec<String> = samples.iter().step_by(2).map(|s| s.id.clone()).collect();
    let key = AnswerKey {
        samples: samples.clone(),
        broken,
    };
    let res = resources(&w, &key);
    let cfg = EvalConfig {
        strategies: vec![Strategy::Zs],
        ..EvalConfig::default()
    };
    let report = run_eval(&samples, &res, &PipelineConfig::default(), &cfg).unwrap();
    let row = &report.rows[0];
    assert!((row.valid_sql - 50.0).abs() < 1e-9);
    assert!((row.f1 - 50.0).abs() < 1e-9);
    assert!(report
        .samples
        .iter()
        .filter(|(_, r)| !r.valid_sql)
        .all(|(_, r)| r.f1 == 0.0 && !r.retrieved));
}

#[test]
fn leave_one_out_hides_the_sample_from_retrieval() {
    let w = world();
    let (samples, _) = samples_from_kb(&w.coho.entries, None);
    let llm = MockLlm::new(Transcript::default().rule(
        &["### Task"],
        &["SELECT 1 AS person_id, '2020-01-01' AS index_date"],
    ));
    let res = resources(&w, &llm);
    let cfg = EvalConfig {
        strategies: vec![Strategy::RagC],
        ..EvalConfig::default()
    };
    run_eval(&samples[..3], &res, &PipelineConfig::default(), &cfg).unwrap();
    let reqs = llm.requests();
    assert_eq!(reqs.len(), 3);
    for (s, r) in samples.iter().zip(&reqs) {
        let text = r.full_text();
        assert!(!text.contains(&s.reference_sql), "{} leaked", s.id);
    }

    let no_loo = MockLlm::new(Transcript::default().rule(
        &["### Task"],
        &["SELECT 1 AS person_id, '2020-01-01' AS index_date"],
    ));
    let res = resources(&w, &no_loo);
    let cfg = EvalConfig {
        leave_one_out: false,
        ..cfg
    };
    run_eval(&samples[..1], &res, &PipelineConfig::default(), &cfg).unwrap();
    assert!(no_loo.requests()[0]
        .full_text()
        .contains(samples[0].reference_sql.trim()));
}

#[test]
fn unavailable_backend_aborts() {
    let w = world();
    let path = std::env::temp_dir().join(format!("cohort-eval-{}.sqlite", std::process::id()));
    w.backend.save_to(&path).unwrap();
    let doomed = SqliteBackend::open(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let (samples, _) = samples_from_kb(&w.coho.entries, None);
    let llm = MockLlm::new(Transcript::default());
    let mut res = resources(&w, &llm);
    res.executor = &doomed;
    let err = run_eval(
        &samples[..1],
        &res,
        &PipelineConfig::default(),
        &EvalConfig::default(),
    );
    assert!(
        matches!(err, Err(EvalError::BackendUnavailable(_))),
        "{err:?}"
    );
}
