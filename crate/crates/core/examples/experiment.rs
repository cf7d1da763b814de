//! Run a full experiment from a JSON config and write the CSV outputs.
//!
//! ```text
//! cargo run --release --example experiment -- configs/gpd_periodic.json /tmp/gpd 5
//! ```

use std::path::PathBuf;

use osa_sim::metrics::Normalization;
use osa_sim::{runner, ExperimentConfig};

fn main() -> osa_sim::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(path) => ExperimentConfig::load(&PathBuf::from(path))?,
        None => ExperimentConfig::default(),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/experiment".into()));
    cfg.replications = args.next().map_or(5, |r| r.parse().expect("replication count"));

    let report = runner::run_experiment(&cfg, &out)?;
    println!("{} replications x {} frames -> {}", cfg.replications, cfg.horizon, out.display());
    for res in &report.results {
        let row = res.summary(Normalization::PerAttempt);
        println!(
            "{:<16} sensing {:.4} ± {:.4}  throughput {:.4}  collisions {:.4}",
            res.policy.name(),
            row.sensing.mean,
            row.sensing.std,
            row.throughput.mean,
            row.collisions.mean,
        );
    }
    Ok(())
}
