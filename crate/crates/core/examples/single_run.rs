//! One replication of every policy on the same scenario, with event counts
//! and the final normalized metrics.

use osa_sim::metrics::{final_value, normalized_series, Metric, Normalization};
use osa_sim::seed::StreamSeeds;
use osa_sim::simcore::FrameEvent;
use osa_sim::{ExperimentConfig, Policy, Simulation};

fn main() -> osa_sim::Result<()> {
    let cfg = ExperimentConfig {
        horizon: 5000,
        ..Default::default()
    };
    let scenario = cfg.scenario(0);
    for (c, m) in scenario.channels.iter().enumerate() {
        println!("channel {c}: occupancy {:.2}", m.occupancy());
    }
    println!(
        "{:<16} {:>7} {:>7} {:>9} {:>8} {:>9} {:>10}",
        "policy", "grants", "handoff", "successes", "collided", "sensing", "throughput"
    );
    for policy in Policy::ALL {
        let mut sim = Simulation::new(&scenario, &cfg.engine(), policy, StreamSeeds::new(cfg.seed, 0))?;
        sim.record_events(true);
        let trace = sim.run(cfg.horizon)?;
        sim.check_invariants().expect("engine invariants");
        let handoffs = sim
            .events()
            .iter()
            .filter(|(_, e)| matches!(e, FrameEvent::SkipGranted { handoff: true, .. }))
            .count();
        let t = sim.totals();
        let y = |m| final_value(&normalized_series(&trace, m, Normalization::PerAttempt)).unwrap_or(f64::NAN);
        println!(
            "{:<16} {:>7} {:>7} {:>9} {:>8} {:>9.4} {:>10.4}",
            policy.name(),
            t.grants,
            handoffs,
            t.successes,
            t.tx_collisions,
            y(Metric::Sensing),
            y(Metric::Throughput),
        );
    }
    Ok(())
}
