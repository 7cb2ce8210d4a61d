//! `spp`: run, sweep, analyze and report continual-learning experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spp_core::config::{self, ExperimentConfig, StrategyKind};
use spp_core::{report, runner};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "spp", version, about = "Continual learning with soft parameter pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured strategy through the task sequence.
    Run {
        config: PathBuf,
        /// Override the configured strategy list (comma separated).
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        /// Override the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep lambda on validation splits carved from the training data.
    Sweep {
        config: PathBuf,
        /// Override the configured grid (comma separated).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Emit histogram, Fréchet and change-map CSVs from a finished run.
    Analyze {
        run_dir: PathBuf,
        #[arg(long, default_value_t = report::DEFAULT_BINS)]
        bins: usize,
    },
    /// Print the metric summary table of a finished run.
    Report { run_dir: PathBuf },
    /// Validate a config and print it with defaults filled in.
    Validate { config: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    config::validate_config(path).map_err(|e| Failure::Validation(e.to_string()))
}

fn revalidate(config: &ExperimentConfig) -> Result<(), Failure> {
    let errors = config.semantic_errors();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(config::ValidationErrors(errors).to_string()))
    }
}

fn parse_strategies(names: &[String]) -> Result<Vec<StrategyKind>, Failure> {
    names
        .iter()
        .map(|n| n.trim().parse().map_err(|e: spp_core::Error| Failure::Validation(e.to_string())))
        .collect()
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            strategies,
            output,
        } => {
            let mut cfg = load(&config)?;
            if let Some(names) = strategies {
                cfg.strategies = parse_strategies(&names)?;
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            revalidate(&cfg)?;
            let outcome = runner::run_sequence(&cfg).context("experiment failed")?;
            print!("{}", report::format_table(&outcome.record));
            println!("results written to {}", cfg.output_dir.display());
            if outcome.record.strategies.iter().any(|s| !s.is_completed()) {
                return Err(Failure::Runtime(anyhow::anyhow!("one or more strategies failed")));
            }
        }
        Command::Sweep {
            config,
            grid,
            strategy,
            output,
        } => {
            let mut cfg = load(&config)?;
            if let Some(g) = grid {
                cfg.sweep.grid = g;
            }
            if let Some(s) = strategy {
                cfg.sweep.strategy = parse_strategies(&[s])?[0];
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            revalidate(&cfg)?;
            report::write_resolved_config(&cfg.output_dir, &cfg).context("writing config")?;
            let result = runner::sweep(&cfg).context("sweep failed")?;
            report::write_sweep(&cfg.output_dir, &result).context("writing sweep results")?;
            for p in result.points.iter().chain(&result.baseline) {
                let acc = p.summary.acc.map_or("failed".into(), |a| format!("{:.2}", 100.0 * a));
                println!("{:<6} lambda={:<8} ACC={acc}", p.strategy, p.lambda);
            }
            if let Some(best) = result.best_lambda {
                println!("best lambda: {best}");
            }
        }
        Command::Analyze { run_dir, bins } => {
            let out = report::analyze_run_dir(&run_dir, bins).context("analysis failed")?;
            for r in &out.frechet {
                println!("{:<10} {:<8} {} {:.6}", r.method, r.layer, r.task_pair, r.distance);
            }
            println!("analysis written to {}", run_dir.display());
        }
        Command::Report { run_dir } => {
            let record = report::load_results(&run_dir).context("reading results")?;
            print!("{}", report::format_table(&record));
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("{}", cfg.to_json_pretty());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprint!("{msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
