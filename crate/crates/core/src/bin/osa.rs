use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use osa_sim::metrics::Normalization;
use osa_sim::{runner, ExperimentConfig, Policy};

#[derive(Parser)]
#[command(name = "osa", version, about = "Opportunistic spectrum access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write traces, ε traces and a summary table.
    Run {
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the replication count.
        #[arg(long)]
        reps: Option<u64>,
        /// Override the horizon in frames.
        #[arg(long)]
        frames: Option<u64>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated policy list, e.g. `traditional,proposed-spsa`.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        /// Print the summary table.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Print the default config as JSON.
    Defaults,
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

fn run(cli: Cli) -> osa_sim::Result<()> {
    match cli.command {
        Command::Defaults => {
            println!("{}", ExperimentConfig::default().to_json()?);
            Ok(())
        }
        Command::Run {
            config,
            out,
            reps,
            frames,
            seed,
            policies,
            verbose,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(r) = reps {
                cfg.replications = r;
            }
            if let Some(h) = frames {
                cfg.horizon = h;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(list) = policies {
                cfg.policies = list
                    .iter()
                    .map(|p| p.trim().parse::<Policy>())
                    .collect::<osa_sim::Result<_>>()?;
            }
            cfg.validate()?;
            let started = Instant::now();
            let report = runner::run_experiment(&cfg, &out)?;
            if verbose {
                println!(
                    "{:<16} {:<12} {:>10} {:>11} {:>11} {:>11}",
                    "policy", "norm", "sensing", "throughput", "collisions", "pu_overlap"
                );
                for res in &report.results {
                    for norm in Normalization::ALL {
                        let row = res.summary(norm);
                        println!(
                            "{:<16} {:<12} {:>10.4} {:>11.4} {:>11.4} {:>11.4}",
                            res.policy.name(),
                            norm.name(),
                            row.sensing.mean,
                            row.throughput.mean,
                            row.collisions.mean,
                            row.pu_overlaps.mean
                        );
                    }
                }
                println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
            }
            Ok(())
        }
    }
}
