use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mrag::config::RunConfig;
use mrag::llm_gateway::GatewayMode;
use mrag::pipeline::{self, PipelineError};
use mrag::retrieval::ContextOrdering;
use mrag::store::StoreError;

/// Marker-based retrieval-augmented generation.
#[derive(Parser)]
#[command(name = "mrag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the token budget.
    #[arg(long, global = true)]
    budget: Option<usize>,

    /// Override the context ordering.
    #[arg(long, global = true, value_parser = parse_ordering)]
    ordering: Option<ContextOrdering>,

    /// Override the gateway mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<GatewayMode>,

    /// Machine-readable stdout only; logs limited to errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Extract markers for every corpus document.
    Extract,
    /// Embed all keys and write the vector index.
    Index,
    /// Print the budgeted marker selection for a query.
    Query { text: String },
    /// Answer a query from retrieved markers.
    Answer { text: String },
    /// Score every strategy at every configured budget.
    Bench,
    /// Coverage and key/value length statistics of the marker store.
    Stats,
}

fn parse_ordering(s: &str) -> Result<ContextOrdering, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<GatewayMode, String> {
    s.parse()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (e.g. `| head`) is not our failure
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("--config <file.json> is required")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(b) = cli.budget {
        cfg.budget.budget_tokens = b;
    }
    if let Some(o) = cli.ordering {
        cfg.ordering = o;
    }
    if let Some(m) = cli.mode {
        cfg.gateway.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Extract => {
            let gateway = pipeline::open_gateway(&cfg)?;
            let out = pipeline::run_extract(&cfg, &gateway)?;
            log::info!(
                "{} documents, {} markers ({} fallback) -> {}",
                out.documents,
                out.markers,
                out.fallback_markers,
                out.marker_store.display()
            );
            print_json(&out)?;
            if !out.fully_fallback.is_empty() {
                log::warn!("fully fallback documents: {}", out.fully_fallback.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Index => {
            let meta = pipeline::run_index(&cfg)?;
            log::info!("indexed {} keys of dim {}", meta.count, meta.dim);
            print_json(&meta)?;
        }
        Command::Query { text } => print_json(&pipeline::run_query(&cfg, text)?)?,
        Command::Answer { text } => {
            let gateway = pipeline::open_gateway(&cfg)?;
            print_json(&pipeline::run_answer(&cfg, text, &gateway)?)?;
        }
        Command::Bench => {
            let gateway = pipeline::open_gateway(&cfg)?;
            let out = pipeline::run_bench(&cfg, &gateway)?;
            for (strategy, budget, f1) in &out.mean_f1 {
                log::info!("{strategy:>16} B={budget:<5} mean F1 {f1:.4}");
            }
            print_json(&out)?;
        }
        Command::Stats => print_json(&pipeline::run_stats(&cfg)?)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            if let Some(PipelineError::Store(StoreError::VersionMismatch { .. })) = e.downcast_ref() {
                eprintln!("error: VersionMismatch: {e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
