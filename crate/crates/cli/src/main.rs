use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedfor::config::load_config;
use fedfor::experiment::{run_experiment, summarize_dir, SUMMARY_FILE};
use fedfor::metrics::SummaryTable;
use fedfor::Error;

/// Federated learning simulator: FedFOR and baselines on shifted client data.
#[derive(Debug, Parser)]
#[command(name = "fedfor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (method, seed) cell of a config and write metrics + summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel runs; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
        /// `key=value` in TOML syntax, applied on top of the file. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute summary.csv from the metrics files in a run directory.
    Summarize {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
}

const EXIT_RUN: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn report(err: &Error) {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn print_summary(table: &SummaryTable) {
    println!(
        "{:<10} {:>3} {:>10} {:>10} {:>8}",
        "method", "E", "half", "final", "acc@x"
    );
    for r in &table.rows {
        let reach = r
            .acc_at_x
            .map_or_else(|| "NA".to_string(), |x| format!("{x}"));
        println!(
            "{:<10} {:>3} {:>10.4} {:>10.4} {:>8}",
            r.method.name(),
            r.epochs,
            r.half_mean,
            r.final_mean,
            reach
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            overrides,
        } => {
            let mut cfg = match load_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    report(&e);
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            match run_experiment(&cfg) {
                Ok(output) => {
                    print_summary(&output.summary);
                    println!("wrote {}", cfg.output_dir.join(SUMMARY_FILE).display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    report(&e);
                    ExitCode::from(EXIT_RUN)
                }
            }
        }
        Command::Summarize { input } => match summarize_dir(&input) {
            Ok(table) => {
                print_summary(&table);
                ExitCode::SUCCESS
            }
            Err(e @ (Error::Config(_) | Error::InvalidConfig { .. })) => {
                report(&e);
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                report(&e);
                ExitCode::from(EXIT_RUN)
            }
        },
    }
}
