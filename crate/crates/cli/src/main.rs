use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod report;

use config::RunContext;
use error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "owl", version, about = "Open-world OOD scoring, theory checks, spectral analysis and EM simulation")]
struct Cli {
    /// JSON config for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports and data files.
    #[arg(long, global = true, default_value = "owl-out")]
    out: PathBuf,
    /// Do not echo reports to stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic datasets as EMB1 files plus a manifest.
    Gen,
    /// Score ID and OOD embeddings with post-hoc detectors.
    Score,
    /// Detection metrics from score tables, and clustering accuracy.
    Eval,
    /// Toy-graph theorems, K-means perturbation sweeps, eigen checks.
    Spectral {
        /// Built-in case: nscl, sorl, or graph (graph needs a config).
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        tau_s: Option<f64>,
        #[arg(long)]
        tau_c: Option<f64>,
        /// Label-strength grid as start:end:count.
        #[arg(long)]
        delta_grid: Option<String>,
    },
    /// Closed-form rectification and sparsification checks against Monte Carlo.
    Theory,
    /// Prototype EM contrastive training on open-world data.
    Opencon {
        /// Override the novel-set loss weight.
        #[arg(long)]
        lambda_n: Option<f64>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = RunContext {
        out: cli.out,
        quiet: cli.quiet,
    };
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Gen => commands::gen::run(&ctx, cfg),
        Command::Score => commands::score::run(&ctx, cfg),
        Command::Eval => commands::eval::run(&ctx, cfg),
        Command::Spectral {
            case,
            tau_s,
            tau_c,
            delta_grid,
        } => commands::spectral::run(
            &ctx,
            cfg,
            commands::spectral::Flags {
                case,
                tau_s,
                tau_c,
                delta_grid,
            },
        ),
        Command::Theory => commands::theory::run(&ctx, cfg),
        Command::Opencon { lambda_n } => commands::opencon::run(&ctx, cfg, lambda_n),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
