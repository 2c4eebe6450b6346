//! The `forge` command line and review API server.

pub mod server;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use forge_core::analytics::histogram_csv;
use forge_core::config::RunConfig;
use forge_core::ingest::write_samples;
use forge_core::jsonl;
use forge_core::mixer::split_counts;
use forge_core::pipeline::Pipeline;
use forge_core::reports::{self, render_json};
use forge_core::stage::StageOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Rewrite, filter, score and mix multimodal instruction data")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "forge.json")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report what would happen without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read Group A and B sources into the sample store.
    Ingest,
    /// Draw a seeded screening batch from one source.
    Screen {
        #[arg(long)]
        source: String,
        /// Batch size; defaults to the configured screening size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Rewrite Group B samples.
    Rewrite {
        /// Stop after this many samples (resume later).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Judge rewritten samples and keep the accepted ones.
    Judge {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score original and rewritten samples.
    Score {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print one analysis as JSON.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Write one manifest per configured mix plan.
    Mix,
    /// Serve the review API (and optionally the UI).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static UI assets.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Write every report under the output root.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Token-length histograms of original and rewritten samples.
    Lengths,
    /// Pairwise kappa and the model-substitution analysis.
    #[command(alias = "kappa")]
    Agreement,
    /// Judge discard rate per category.
    FilterRates {
        /// Aligned text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Mean quality scores per source and provenance.
    Scores,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Failure(String);

fn fail(e: impl std::fmt::Display) -> Failure {
    Failure(e.to_string())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    print!("{}", render_json(value));
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(fail)
}

fn needs_model(command: &Command) -> bool {
    matches!(command, Command::Rewrite { .. } | Command::Judge { .. } | Command::Score { .. })
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&cli.config).map_err(fail)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pipeline = if needs_model(&cli.command) && !cli.dry_run {
        Pipeline::new(cfg).map_err(fail)?
    } else {
        Pipeline::offline(cfg).map_err(fail)?
    };
    let dry = cli.dry_run;
    let opts = |limit: Option<usize>| StageOptions { batch_size: pipeline.config().batch_size, limit };

    match cli.command {
        Command::Ingest => {
            if dry {
                let sources = pipeline.sources().map_err(fail)?;
                let plan: Vec<_> = sources.iter().map(|s| json!({ "source_id": s.source_id, "group": s.group })).collect();
                print_json(&json!({ "dry_run": true, "sources": plan }));
            } else {
                print_json(&pipeline.ingest().map_err(fail)?);
            }
        }
        Command::Screen { source, n } => {
            let n = n.unwrap_or(pipeline.config().screening_size);
            let batch = pipeline.screen(&source, n, pipeline.config().seed).map_err(fail)?;
            let path = pipeline.layout().screening_dir().join(format!("{source}.jsonl"));
            if !dry {
                write_samples(&path, &batch).map_err(fail)?;
            }
            print_json(&json!({ "source_id": source, "drawn": batch.len(), "path": path, "dry_run": dry }));
        }
        Command::Rewrite { limit } => {
            if dry {
                print_json(&pipeline.plan_rewrite().map_err(fail)?);
            } else {
                print_json(&runtime()?.block_on(pipeline.rewrite(opts(limit))).map_err(fail)?);
            }
        }
        Command::Judge { limit } => {
            if dry {
                let n = count_lines(&pipeline.layout().rewritten())?;
                print_json(&json!({ "dry_run": true, "to_judge": n }));
            } else {
                print_json(&runtime()?.block_on(pipeline.judge(opts(limit))).map_err(fail)?);
            }
        }
        Command::Score { limit } => {
            if dry {
                let layout = pipeline.layout();
                let rewritten = if layout.filtered().exists() { layout.filtered() } else { layout.rewritten() };
                print_json(&json!({
                    "dry_run": true,
                    "original": count_lines(&layout.group_b())?,
                    "rewritten": count_lines(&rewritten)?,
                    "score_sample_size": pipeline.config().score_sample_size,
                }));
            } else {
                print_json(&runtime()?.block_on(pipeline.score(opts(limit))).map_err(fail)?);
            }
        }
        Command::Analyze { what } => {
            let layout = pipeline.layout();
            let cfg = pipeline.config();
            match what {
                Analysis::Lengths => {
                    print_json(&reports::length_distribution(layout, cfg.tokenizer, cfg.histogram_bucket).map_err(fail)?)
                }
                Analysis::Agreement => print_json(&reports::agreement_report(layout).map_err(fail)?),
                Analysis::FilterRates { table } => {
                    let r = reports::filter_rate_report(layout).map_err(fail)?;
                    if table {
                        print!("{}", r.to_table());
                    } else {
                        print_json(&r);
                    }
                }
                Analysis::Scores => print_json(&reports::score_report(layout).map_err(fail)?),
            }
        }
        Command::Mix => {
            if dry {
                let plans: Vec<_> = pipeline
                    .config()
                    .mix_plans
                    .iter()
                    .map(|p| {
                        let (rw, or) = split_counts(p.total, p.rewritten_fraction);
                        json!({ "plan": p.name, "n_rewritten": rw, "n_original": or })
                    })
                    .collect();
                print_json(&json!({ "dry_run": true, "plans": plans }));
            } else {
                print_json(&pipeline.mix().map_err(fail)?);
            }
        }
        Command::Serve { addr, ui } => {
            let app = server::router(server::AppState::new(pipeline), ui);
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await.map_err(fail)?;
                eprintln!("listening on http://{}", listener.local_addr().map_err(fail)?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(fail)
            })?;
        }
        Command::Report => write_reports(&pipeline, dry)?,
    }
    Ok(())
}

fn count_lines(path: &std::path::Path) -> Result<usize, Failure> {
    if !path.exists() {
        return Ok(0);
    }
    let values: Vec<serde_json::Value> = jsonl::read_all(path).map_err(fail)?;
    Ok(values.len())
}

fn write_reports(pipeline: &Pipeline, dry: bool) -> Result<(), Failure> {
    let layout = pipeline.layout();
    let cfg = pipeline.config();
    let lengths = reports::length_distribution(layout, cfg.tokenizer, cfg.histogram_bucket).map_err(fail)?;
    let outputs = [
        ("filter_rates.json", render_json(&reports::filter_rate_report(layout).map_err(fail)?)),
        ("agreement.json", render_json(&reports::agreement_report(layout).map_err(fail)?)),
        ("scores.json", render_json(&reports::score_report(layout).map_err(fail)?)),
        ("lengths.json", render_json(&lengths)),
        ("lengths_original.csv", histogram_csv(&lengths.original)),
        ("lengths_rewritten.csv", histogram_csv(&lengths.rewritten)),
    ];
    let dir = layout.reports_dir();
    let mut written = Vec::new();
    for (name, body) in outputs {
        let path = dir.join(name);
        if !dry {
            std::fs::create_dir_all(&dir).map_err(fail)?;
            std::fs::write(&path, body).map_err(fail)?;
        }
        written.push(path);
    }
    print_json(&json!({ "dry_run": dry, "reports": written }));
    Ok(())
}
