use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cohort_core::generation::Strategy;
use cohort_core::kb::KbKind;
use cohort_service::commands::{self, CliError, EvaluateArgs, GenerateArgs, SynthArgs};
use cohort_service::config::AppConfig;
use cohort_service::context::AppContext;
use cohort_service::jobs::JobStore;
use cohort_service::service::{serve, AppState};

#[derive(Parser)]
#[command(
    name = "cohortctl",
    version,
    about = "Generate OMOP cohort SQL from eligibility criteria"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunOpts {
    /// Configuration file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Criteria file: structured text, or `.json` structured criteria.
    #[arg(long)]
    criteria: PathBuf,
    /// Output directory for cohort.csv, funnel.json and sql.json.
    #[arg(long, short, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the configured strategy (zs, rag_a, rag_c, rag_ac).
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Subcommand)]
enum Command {
    /// Single cohort query plus the attrition funnel.
    Generate(RunOpts),
    /// Attrition funnel only; the cohort is the funnel's final step.
    Funnel(RunOpts),
    /// Compare strategies on a criteria knowledge base.
    Evaluate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        kb_ask: Option<PathBuf>,
        #[arg(long)]
        kb_coho: Option<PathBuf>,
        /// TOML file with the backend settings.
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "zs,rag_a,rag_c,rag_ac")]
        strategies: Vec<Strategy>,
        /// Exclude each sample's own entry from retrieval.
        #[arg(long)]
        loo: bool,
        #[arg(long)]
        window_days: Option<u32>,
        /// Also write the structured report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Knowledge base utilities.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Write a seeded synthetic OMOP database.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        persons: usize,
        /// Also write CONCEPT.tsv and CONCEPT_SYNONYM.tsv here.
        #[arg(long)]
        vocab_dir: Option<PathBuf>,
    },
    /// Run the HTTP job service.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Descriptive statistics for one or both knowledge bases.
    Stats {
        #[arg(long)]
        kb_ask: Option<PathBuf>,
        #[arg(long)]
        kb_coho: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn run_pipeline(opts: RunOpts, funnel_only: bool) -> Result<(), CliError> {
    let ctx = AppContext::build(AppConfig::load(&opts.config)?)?;
    let result = commands::generate(
        &ctx,
        &GenerateArgs {
            criteria: opts.criteria,
            out_dir: opts.out_dir,
            strategy: opts.strategy,
            funnel_only,
        },
    )?;
    let out = &result.outputs;
    println!("cohort: {} persons", out.cohort.len());
    if let Some(f) = &out.funnel {
        for s in &f.steps {
            println!(
                "  {:>2} {:<10} {:>7}  {}",
                s.step.step_index, s.step.criterion_id, s.step.remaining_count, s.text
            );
        }
        if let Some(sim) = f.funnel_similarity {
            println!("funnel/cohort size similarity: {sim:.3}");
        }
    }
    for p in &result.written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(opts) => run_pipeline(opts, false),
        Command::Funnel(opts) => run_pipeline(opts, true),
        Command::Evaluate {
            config,
            kb_ask,
            kb_coho,
            backend,
            strategies,
            loo,
            window_days,
            report,
        } => {
            let cfg = AppConfig::load(&config)?;
            let r = commands::evaluate(
                cfg,
                &EvaluateArgs {
                    kb_ask,
                    kb_coho,
                    backend,
                    strategies,
                    leave_one_out: loo,
                    window_days,
                },
            )?;
            print!("{}", r.render_table());
            for e in &r.excluded {
                println!("excluded {}: {}", e.sample_id, e.note);
            }
            if let Some(p) = report {
                std::fs::write(
                    &p,
                    serde_json::to_vec_pretty(&r).expect("report serializes"),
                )
                .map_err(|source| CliError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
            }
            Ok(())
        }
        Command::Kb {
            command:
                KbCommand::Stats {
                    kb_ask,
                    kb_coho,
                    json,
                },
        } => {
            if kb_ask.is_none() && kb_coho.is_none() {
                return Err(CliError::Input("give --kb-ask and/or --kb-coho".into()));
            }
            let mut all = serde_json::Map::new();
            for (path, kind, title) in [
                (kb_ask, KbKind::Ask, "Question knowledge base"),
                (kb_coho, KbKind::Coho, "Criteria knowledge base"),
            ] {
                let Some(path) = path else { continue };
                let stats = commands::kb_stats_for(&path, kind)?;
                if json {
                    all.insert(
                        kind.to_string(),
                        serde_json::to_value(&stats).expect("stats serialize"),
                    );
                } else {
                    println!("{}", stats.render(title));
                }
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&all).expect("json"));
            }
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            persons,
            vocab_dir,
        } => {
            for p in commands::synth(&SynthArgs {
                out,
                seed,
                persons,
                vocab_dir,
            })? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Serve { config, addr } => {
            let cfg = AppConfig::load(&config)?;
            let store = JobStore::open(&cfg.service.jobs_dir, cfg.service.retention_days)
                .map_err(|e| CliError::Input(e.to_string()))?;
            let ctx = AppContext::build(cfg)?;
            let state = Arc::new(AppState::new(Arc::new(ctx), Arc::new(store)));
            let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                path: "tokio runtime".into(),
                source,
            })?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(|source| CliError::Io {
                        path: addr.clone(),
                        source,
                    })?;
                eprintln!(
                    "listening on {}",
                    listener
                        .local_addr()
                        .map(|a| a.to_string())
                        .unwrap_or(addr.clone())
                );
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                serve(listener, state, shutdown)
                    .await
                    .map_err(|source| CliError::Io { path: addr, source })
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
