//! Tune the exploration factor with SPSA against synthetic collision
//! responses `g(ε) = c·ε` and watch it settle where `g` meets the
//! tolerated threshold.

use osa_sim::explore::{SpsaParams, SpsaState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let params = SpsaParams::default();
    for c in [0.5, 1.0, 2.0, 8.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = SpsaState::new(params, &mut rng);
        let mut trace = Vec::new();
        while state.iteration() <= 1000 {
            let g = (c * state.current()).clamp(0.0, 1.0);
            state.update(g, &mut rng);
            trace.push(state.iterate());
        }
        let tail = &trace[trace.len() / 2..];
        let avg = tail.iter().sum::<f64>() / tail.len() as f64;
        let marks: Vec<String> = [0, 10, 50, 200, 1000]
            .iter()
            .map(|&k| format!("{:.3}", trace[(2 * k).min(trace.len() - 1)]))
            .collect();
        println!(
            "c = {c:>3}: iterate after 0/10/50/200/1000 updates {}; tail mean {avg:.3} (target {:.3})",
            marks.join(" "),
            (params.threshold / c).min(1.0)
        );
    }
}
