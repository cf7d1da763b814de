//! Fit the Dirichlet residual predictor and the parametric baseline to
//! observed idle periods, then compare their skip predictions.

use osa_sim::residual::{ParametricConfig, ParametricResidualModel, ResidualConfig, ResidualModel};
use osa_sim::traffic::{sample_gpd, GpdParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> osa_sim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ResidualConfig::default();
    let mut dirichlet = ResidualModel::new(1, cfg)?;
    let mut parametric = ParametricResidualModel::new(1, ParametricConfig::default(), cfg.support)?;

    // Idle periods with a heavy tail; observations are spaced far enough
    // apart that none merge.
    let off = GpdParams::new(0.3, 12.0, 2.0)?;
    let mut now = 0;
    for _ in 0..2000 {
        let tau = sample_gpd(&off, &mut rng).round().max(1.0);
        now += tau as u64 + 10;
        dirichlet.update(0, tau, now)?;
        parametric.update(0, tau)?;
    }
    println!("truncated observations: {}", dirichlet.truncations());

    let mean = dirichlet.posterior_mean(0);
    let head: Vec<String> = mean[..10].iter().map(|p| format!("{p:.3}")).collect();
    println!("posterior mean, classes 1..10: {}", head.join(" "));
    println!("parametric mean OFF estimate: {:.2}", 1.0 / parametric.posterior_mean_rate(0));

    for eps in [0.0, 0.1, 0.5] {
        let draws: Vec<u32> = (0..5000)
            .map(|_| dirichlet.predict(0, eps, &mut rng).map(|p| p.t_skip))
            .collect::<osa_sim::Result<_>>()?;
        let avg = draws.iter().map(|&t| t as f64).sum::<f64>() / draws.len() as f64;
        let maxed = draws.iter().filter(|&&t| t as usize == cfg.support).count();
        println!(
            "epsilon {eps:.1}: mean skip {avg:6.2}, share at the cap {:.3}",
            maxed as f64 / draws.len() as f64
        );
    }
    let draws: Vec<u32> = (0..5000)
        .map(|_| parametric.predict(0, &mut rng).map(|p| p.t_skip))
        .collect::<osa_sim::Result<_>>()?;
    println!(
        "parametric: mean skip {:6.2}",
        draws.iter().map(|&t| t as f64).sum::<f64>() / draws.len() as f64
    );
    Ok(())
}
