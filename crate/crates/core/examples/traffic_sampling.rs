//! Draw primary-user ON/OFF durations from each traffic model and compare
//! the empirical means and occupancy with their closed forms.

use osa_sim::traffic::{CollisionMode, GpdParams, HedParams, PuProcess, PuTrafficModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> osa_sim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models = [
        (
            "gpd",
            PuTrafficModel::Gpd {
                on: GpdParams::new(0.2, 500.0, 60.0)?,
                off: GpdParams::new(0.4, 500.0, 90.0)?,
            },
        ),
        (
            "hed",
            PuTrafficModel::Hed(HedParams::new(vec![0.7, 0.3], vec![5.0, 120.0], 40.0)?),
        ),
        (
            "exponential",
            PuTrafficModel::Exponential {
                mean_on: 30.0,
                mean_off: 70.0,
            },
        ),
    ];

    println!("{:<12} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9}", "model", "on", "on_emp", "off", "off_emp", "occ", "occ_emp");
    for (name, model) in models {
        model.validate()?;
        let n = 50_000;
        let on: f64 = (0..n).map(|_| model.sample_on(&mut rng)).sum::<f64>() / n as f64;
        let off: f64 = (0..n).map(|_| model.sample_off(&mut rng)).sum::<f64>() / n as f64;

        // Fraction of unit steps that start with the primary user on.
        let mut pu = PuProcess::new(model.clone(), CollisionMode::Resume, &mut rng);
        let steps = 5_000_000;
        let mut busy = 0;
        for _ in 0..steps {
            busy += pu.is_active() as u32;
            pu.advance(1.0, &mut rng);
        }
        println!(
            "{name:<12} {:>10.2} {on:>10.2} {:>10.2} {off:>10.2} {:>9.3} {:>9.3}",
            model.mean_on(),
            model.mean_off(),
            model.occupancy(),
            busy as f64 / steps as f64,
        );
    }
    Ok(())
}
