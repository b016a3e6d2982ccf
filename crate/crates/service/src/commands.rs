//! Subcommand bodies, kept free of argument parsing so tests can call them.

use std::path::{Path, PathBuf};

use cohort_core::criteria::{validate_criteria, CohortCriteria};
use cohort_core::generation::Strategy;
use cohort_core::kb::{kb_stats, load_kb, KbKind, KbStats};
use cohort_core::metrics::{EvalConfig, EvalReport};
use cohort_engine::eval::{run_eval, samples_from_kb};
use cohort_engine::synth::{generate_synthetic_omop, SyntheticDbSpec};
use cohort_engine::vocab::{concept_tsv, synonym_tsv};

use crate::config::{AppConfig, BackendConfig, ConfigError};
use crate::context::{AppContext, SetupError};
use crate::run::{execute, resolve_criteria, write_outputs, CriteriaInput, RunMode, RunOutputs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("{0}")]
    Input(String),
    #[error("pipeline failed: {0}")]
    Pipeline(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads criteria from a file: `.json` holds structured criteria, anything
/// else is criteria text.
pub fn read_criteria(path: &Path) -> Result<CriteriaInput, CliError> {
    let raw = std::fs::read_to_string(path).map_err(io(path))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let c: CohortCriteria = serde_json::from_str(&raw)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let violations = validate_criteria(&c);
        if !violations.is_empty() {
            return Err(CliError::Input(format!(
                "{}: {}",
                path.display(),
                violations.join("; ")
            )));
        }
        return Ok(CriteriaInput::Structured(c));
    }
    if raw.trim().is_empty() {
        return Err(CliError::Input(format!(
            "{}: criteria text is empty",
            path.display()
        )));
    }
    Ok(CriteriaInput::Text(raw))
}

pub struct GenerateArgs {
    pub criteria: PathBuf,
    pub out_dir: PathBuf,
    pub strategy: Option<Strategy>,
    /// Skip the single cohort query and build only the funnel.
    pub funnel_only: bool,
}

pub struct GenerateResult {
    pub outputs: RunOutputs,
    pub written: Vec<PathBuf>,
}

pub fn generate(ctx: &AppContext, args: &GenerateArgs) -> Result<GenerateResult, CliError> {
    let input = read_criteria(&args.criteria)?;
    let res = ctx.resources();
    let criteria = resolve_criteria(&input, &res).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut cfg = ctx.pipeline_config();
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    let mode = if args.funnel_only {
        RunMode::FunnelOnly
    } else {
        cfg.funnel = true;
        RunMode::Cohort
    };
    let outputs = execute(&criteria, &res, &cfg, mode, &|_| {})
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let written = write_outputs(&args.out_dir, &outputs).map_err(io(&args.out_dir))?;
    Ok(GenerateResult { outputs, written })
}

pub struct EvaluateArgs {
    pub kb_ask: Option<PathBuf>,
    pub kb_coho: Option<PathBuf>,
    /// TOML file holding a backend table (`kind = "sqlite"`, ...).
    pub backend: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub leave_one_out: bool,
    pub window_days: Option<u32>,
}

pub fn load_backend_config(path: &Path) -> Result<BackendConfig, CliError> {
    let raw = std::fs::read_to_string(path).map_err(io(path))?;
    let mut b: BackendConfig =
        toml::from_str(&raw).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let BackendConfig::Sqlite { path: db, .. } = &mut b {
        if db.is_relative() {
            *db = path.parent().unwrap_or(Path::new(".")).join(&*db);
        }
    }
    Ok(b)
}

/// Scores each strategy on the criteria KB's entries, using their SQL as
/// the reference.
pub fn evaluate(mut config: AppConfig, args: &EvaluateArgs) -> Result<EvalReport, CliError> {
    if let Some(p) = &args.kb_ask {
        config.kb.ask = Some(p.clone());
    }
    if let Some(p) = &args.kb_coho {
        config.kb.coho = Some(p.clone());
    }
    if let Some(p) = &args.backend {
        config.backend = load_backend_config(p)?;
    }
    if args.strategies.is_empty() {
        return Err(CliError::Input("no strategies given".into()));
    }
    let window_days = args.window_days.unwrap_or(config.pipeline.window_days);
    let ctx = AppContext::build(config)?;
    let coho = ctx.coho.as_ref().ok_or_else(|| {
        CliError::Input("evaluation needs a criteria knowledge base (--kb-coho)".into())
    })?;
    let (samples, skipped) = samples_from_kb(&coho.entries, Some(&ctx.detector));
    if samples.is_empty() {
        return Err(CliError::Input(
            "no usable samples in the criteria knowledge base".into(),
        ));
    }
    let eval_cfg = EvalConfig {
        window_days,
        strategies: args.strategies.clone(),
        leave_one_out: args.leave_one_out,
    };
    let mut report = run_eval(
        &samples,
        &ctx.resources(),
        &ctx.pipeline_config(),
        &eval_cfg,
    )
    .map_err(|e| CliError::Pipeline(e.to_string()))?;
    report.excluded.extend(skipped);
    Ok(report)
}

pub fn kb_stats_for(path: &Path, kind: KbKind) -> Result<KbStats, CliError> {
    let entries =
        load_kb(path, kind).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    kb_stats(&entries).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub persons: usize,
    pub vocab_dir: Option<PathBuf>,
}

/// Writes a synthetic OMOP database file and, optionally, its vocabulary.
pub fn synth(args: &SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.out.exists() {
        return Err(CliError::Input(format!(
            "{} already exists",
            args.out.display()
        )));
    }
    let spec = SyntheticDbSpec {
        seed: args.seed,
        n_persons: args.persons,
        ..SyntheticDbSpec::default()
    };
    let (_, backend) =
        generate_synthetic_omop(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    backend
        .save_to(&args.out)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut written = vec![args.out.clone()];
    if let Some(dir) = &args.vocab_dir {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, body) in [
            ("CONCEPT.tsv", concept_tsv()),
            ("CONCEPT_SYNONYM.tsv", synonym_tsv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io(&p))?;
            written.push(p);
        }
    }
    Ok(written)
}
