//! Learn a value table from noisy throughput feedback and assign channels
//! to waiting devices by hill climbing.

use osa_sim::assign::{hill_climb, hill_climb_detailed, AssignConfig, ValueTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> osa_sim::Result<()> {
    let (channels, devices) = (4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Hidden mean throughput of every device on every channel.
    let truth: Vec<Vec<f64>> = (0..channels)
        .map(|_| (0..devices).map(|_| rng.random_range(1.0..5.0)).collect())
        .collect();

    let cfg = AssignConfig::default();
    let mut table = ValueTable::new(channels, devices, cfg.learning_rate)?;
    let waiting: Vec<usize> = (0..devices).collect();
    let free: Vec<usize> = (0..channels).collect();

    for round in 0..400 {
        let assignment = hill_climb(&table, &waiting, &free, &mut rng, &cfg);
        for &(d, c) in assignment.pairs() {
            let observed = truth[c][d] * rng.random_range(0.8..1.2);
            table.update(d, c, observed)?;
        }
        if round % 100 == 0 {
            let value: f64 = assignment.pairs().iter().map(|&(d, c)| truth[c][d]).sum();
            println!("round {round:>3}: {} pairs, true value {value:.2}", assignment.len());
        }
    }

    let climb = hill_climb_detailed(&table, &waiting, &free, &mut rng, &cfg);
    println!(
        "final climb: {:.2} -> {:.2} in {} proposals",
        climb.initial_quality, climb.climbed_quality, climb.proposals
    );
    for &(d, c) in climb.climbed.pairs() {
        println!("  device {d} -> channel {c} (learned {:.2}, true {:.2})", table.get(c, d), truth[c][d]);
    }
    Ok(())
}
