use std::path::PathBuf;

use clap::{Parser, Subcommand};

use smp_cli::config::{Overrides, ReportFormat, ResolvedConfig};
use smp_cli::{commands, exit_code, CliError};

#[derive(Parser)]
#[command(
    name = "smp",
    about = "Stochastic-control toolkit: worked-example reproduction, optimality certificates, backward-field evaluation, decoupling-field solver",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key-value config file (`key = value`, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for all counter-generated randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo path count.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Euler steps over the horizon.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Concurrency cap (results are worker-count independent).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Stdout rendering: json, csv or table.
    #[arg(long, global = true)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the built-in worked example end to end and certify its numbers.
    ExampleE,
    /// Build costates probabilistically and check a candidate policy's
    /// optimality (variational grid + spike identities).
    SmpCheck,
    /// Evaluate a backward field on an x-grid.
    FkEval,
    /// Solve the decoupling PDE, measure residuals, assemble the
    /// forward-backward fields.
    FbspdeSolve,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let overrides = Overrides {
        config_path: cli.config,
        out_dir: cli.out,
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        workers: cli.workers,
        format: cli.format,
    };
    let cfg = ResolvedConfig::resolve(&overrides)?;
    match cli.command {
        Command::ExampleE => {
            let report = commands::example_e::run(&cfg)?;
            match cfg.format {
                ReportFormat::Table => print!("{}", commands::example_e::render_table(&report)),
                _ => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?
                ),
            }
            Ok(report.pass)
        }
        Command::SmpCheck => {
            let report = commands::smp_check::run(&cfg)?;
            match cfg.format {
                ReportFormat::Table => print!("{}", report.report.render_table()),
                _ => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?
                ),
            }
            Ok(report.pass)
        }
        Command::FkEval => {
            let report = commands::fk_eval::run(&cfg)?;
            match cfg.format {
                ReportFormat::Csv => {
                    let csv = std::fs::read_to_string(cfg.out_dir.join("fk_field.csv"))
                        .map_err(|e| CliError::Run(e.to_string()))?;
                    print!("{csv}");
                }
                _ => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?
                ),
            }
            Ok(report.pass)
        }
        Command::FbspdeSolve => {
            let report = commands::fbspde_solve::run(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?
            );
            Ok(report.pass)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = run(cli);
    if let Err(e) = &outcome {
        eprintln!("{e}");
    }
    std::process::exit(exit_code(&outcome));
}
