//! Exploration factor ε for the residual predictor, per channel.
//!
//! Three schedules: constant, polynomial decay `1/t^β`, and an SPSA
//! controller that steers the observed collision fraction `g` towards the
//! tolerated threshold by minimizing `L(ε) = (T_int - g(ε))²` from pairs of
//! perturbed evaluations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpsaParams {
    /// Step-size numerator `a`.
    pub a: f64,
    /// Step-size decay exponent `α`.
    pub alpha: f64,
    /// Perturbation numerator `v`.
    pub v: f64,
    /// Perturbation decay exponent `γ`.
    pub gamma: f64,
    /// Starting iterate ε₀.
    pub epsilon0: f64,
    /// T_int: tolerated collision fraction.
    pub threshold: f64,
}

impl Default for SpsaParams {
    fn default() -> Self {
        SpsaParams {
            a: 5.0,
            alpha: 0.2,
            v: 0.1,
            gamma: 0.4,
            epsilon0: 0.1,
            threshold: 0.1,
        }
    }
}

impl SpsaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.v > 0.0) {
            return Err(invalid("spsa", "a and v must be > 0"));
        }
        if !(self.alpha > 0.0 && self.gamma > 0.0) {
            return Err(invalid("spsa", "alpha and gamma must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.epsilon0) {
            return Err(invalid("spsa.epsilon0", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid("spsa.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One channel's SPSA iterate.
///
/// Calls alternate: an odd call records the loss measured at `ε_k + v_k·Δ`,
/// the following even call measures `ε_k - v_k·Δ`, forms the two-sided
/// gradient estimate and takes the step. Δ is redrawn at the start of each
/// pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsaState {
    params: SpsaParams,
    epsilon: f64,
    k: u64,
    count: u64,
    delta: f64,
    plus_loss: f64,
}

impl SpsaState {
    pub fn new<R: Rng + ?Sized>(params: SpsaParams, rng: &mut R) -> Self {
        SpsaState {
            params,
            epsilon: params.epsilon0,
            k: 1,
            count: 1,
            delta: draw_sign(rng),
            plus_loss: 0.0,
        }
    }

    /// State with an explicit iterate and perturbation sign.
    pub fn with_iterate(params: SpsaParams, epsilon: f64, k: u64, delta: f64) -> Self {
        assert!(k >= 1);
        assert!(delta == 1.0 || delta == -1.0);
        SpsaState {
            params,
            epsilon,
            k,
            count: 1,
            delta,
            plus_loss: 0.0,
        }
    }

    pub fn params(&self) -> &SpsaParams {
        &self.params
    }

    /// The unperturbed iterate ε_k.
    pub fn iterate(&self) -> f64 {
        self.epsilon
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn calls(&self) -> u64 {
        self.count
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `a_k = (a/k)^α`.
    pub fn step_size(&self, k: u64) -> f64 {
        (self.params.a / k as f64).powf(self.params.alpha)
    }

    /// `v_k = (v/k)^γ`.
    pub fn perturbation(&self, k: u64) -> f64 {
        (self.params.v / k as f64).powf(self.params.gamma)
    }

    pub fn loss(&self, g: f64) -> f64 {
        let d = self.params.threshold - g;
        d * d
    }

    fn plus_phase(&self) -> bool {
        self.count % 2 == 1
    }

    /// ε to use while the next loss sample is being collected.
    pub fn current(&self) -> f64 {
        let vk = self.perturbation(self.k);
        let sign = if self.plus_phase() { 1.0 } else { -1.0 };
        (self.epsilon + sign * vk * self.delta).clamp(0.0, 1.0)
    }

    /// Feed the collision fraction observed under [`current`](Self::current).
    pub fn update<R: Rng + ?Sized>(&mut self, g: f64, rng: &mut R) {
        let loss = self.loss(g);
        if self.plus_phase() {
            self.plus_loss = loss;
        } else {
            let vk = self.perturbation(self.k);
            let ak = self.step_size(self.k);
            let grad = (self.plus_loss - loss) / (2.0 * vk * self.delta);
            self.epsilon = (self.epsilon - ak * grad).clamp(0.0, 1.0);
            self.k += 1;
            self.delta = draw_sign(rng);
        }
        self.count += 1;
    }
}

fn draw_sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExplorationPolicy {
    Constant { epsilon: f64 },
    Decay { beta: f64 },
    Spsa(SpsaState),
}

impl ExplorationPolicy {
    /// ε in effect at frame `t` (frames are counted from 1).
    pub fn current_epsilon(&self, t: u64) -> f64 {
        match self {
            ExplorationPolicy::Constant { epsilon } => *epsilon,
            ExplorationPolicy::Decay { beta } => (1.0 / (t.max(1) as f64).powf(*beta)).min(1.0),
            ExplorationPolicy::Spsa(s) => s.current(),
        }
    }
}

/// `g = collisions / opportunities`; `None` when nothing was attempted, in
/// which case no SPSA step is consumed.
pub fn record_collision_window(collisions: u64, opportunities: u64) -> Option<f64> {
    if opportunities == 0 {
        None
    } else {
        Some(collisions as f64 / opportunities as f64)
    }
}

/// Accumulates transmitted frames on one channel until the evaluation
/// window is full.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollisionWindow {
    /// Frames that overlapped the primary user.
    pub collisions: u64,
    /// Frames transmitted.
    pub attempts: u64,
}

impl CollisionWindow {
    /// Fold in one completed transmission of `frames` frames, `collisions`
    /// of which overlapped the primary user. Returns `g` and resets once at
    /// least `size` frames have been seen.
    pub fn record(&mut self, collisions: u64, frames: u64, size: u64) -> Option<f64> {
        debug_assert!(collisions <= frames);
        self.attempts += frames;
        self.collisions += collisions;
        if self.attempts >= size {
            let g = record_collision_window(self.collisions, self.attempts);
            *self = CollisionWindow::default();
            g
        } else {
            None
        }
    }
}

/// Which exploration schedule a policy runs and with what parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    /// ε for the fixed-ε variant.
    pub fixed_epsilon: f64,
    /// β for the decaying variant.
    pub decay_beta: f64,
    pub spsa: SpsaParams,
    /// Transmitted frames per SPSA loss sample; the sample closes at the
    /// first completed transmission that reaches it.
    pub window: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            fixed_epsilon: 0.1,
            decay_beta: 0.5,
            spsa: SpsaParams::default(),
            window: 25,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_epsilon) {
            return Err(invalid("exploration.fixed_epsilon", "must lie in [0, 1]"));
        }
        if !(self.decay_beta > 0.0) {
            return Err(invalid("exploration.decay_beta", "must be > 0"));
        }
        if self.window == 0 {
            return Err(invalid("exploration.window", "must be >= 1"));
        }
        self.spsa.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Decay,
    Spsa,
}

/// Per-channel exploration state owned by the central node.
#[derive(Debug, Clone)]
pub struct ExplorationController {
    policies: Vec<ExplorationPolicy>,
    windows: Vec<CollisionWindow>,
    window: u64,
}

impl ExplorationController {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        kind: ScheduleKind,
        cfg: &ExplorationConfig,
        rng: &mut R,
    ) -> Self {
        let policies = (0..channels)
            .map(|_| match kind {
                ScheduleKind::Constant => ExplorationPolicy::Constant {
                    epsilon: cfg.fixed_epsilon,
                },
                ScheduleKind::Decay => ExplorationPolicy::Decay {
                    beta: cfg.decay_beta,
                },
                ScheduleKind::Spsa => ExplorationPolicy::Spsa(SpsaState::new(cfg.spsa, rng)),
            })
            .collect();
        ExplorationController {
            policies,
            windows: vec![CollisionWindow::default(); channels],
            window: cfg.window,
        }
    }

    pub fn epsilon(&self, channel: usize, t: u64) -> f64 {
        self.policies[channel].current_epsilon(t)
    }

    /// ε for traces: the unperturbed iterate for SPSA, the schedule value
    /// otherwise.
    pub fn nominal(&self, channel: usize, t: u64) -> f64 {
        match &self.policies[channel] {
            ExplorationPolicy::Spsa(s) => s.iterate(),
            p => p.current_epsilon(t),
        }
    }

    pub fn channels(&self) -> usize {
        self.policies.len()
    }

    pub fn policy(&self, channel: usize) -> &ExplorationPolicy {
        &self.policies[channel]
    }

    /// Record one completed transmission of `frames` frames on `channel`,
    /// `collisions` of them overlapping the primary user. Returns `true` when
    /// this closed an evaluation window and the SPSA state advanced.
    pub fn record<R: Rng + ?Sized>(
        &mut self,
        channel: usize,
        collisions: u64,
        frames: u64,
        rng: &mut R,
    ) -> bool {
        let ExplorationPolicy::Spsa(state) = &mut self.policies[channel] else {
            return false;
        };
        match self.windows[channel].record(collisions, frames, self.window) {
            Some(g) => {
                state.update(g, rng);
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedules() {
        assert_eq!(ExplorationPolicy::Decay { beta: 1.0 }.current_epsilon(4), 0.25);
        assert_eq!(ExplorationPolicy::Decay { beta: 0.5 }.current_epsilon(1), 1.0);
        for t in [1, 10, 10_000] {
            assert_eq!(ExplorationPolicy::Constant { epsilon: 0.1 }.current_epsilon(t), 0.1);
        }
    }

    #[test]
    fn spsa_step_arithmetic() {
        // a_1 = 0.5 and v_1 = 0.1 with unit exponents.
        let params = SpsaParams {
            a: 0.5,
            alpha: 1.0,
            v: 0.1,
            gamma: 1.0,
            epsilon0: 0.5,
            threshold: 0.1,
        };
        let mut s = SpsaState::with_iterate(params, 0.5, 1, 1.0);
        let mut r = rng(1);
        assert!((s.current() - 0.6).abs() < 1e-12);
        // L(0.6) = (0.1 - 0.3)^2 = 0.04.
        s.update(0.3, &mut r);
        assert!((s.current() - 0.4).abs() < 1e-12);
        // L(0.4) = (0.1 - 0.5)^2 = 0.16; ĝ = -0.6; ε = 0.5 + 0.5·0.6.
        s.update(0.5, &mut r);
        assert!((s.iterate() - 0.8).abs() < 1e-12);
        assert_eq!(s.iteration(), 2);
        assert_eq!(s.calls(), 3);
    }

    #[test]
    fn flat_loss_leaves_iterate() {
        let mut s = SpsaState::with_iterate(SpsaParams::default(), 0.37, 4, -1.0);
        let mut r = rng(2);
        s.update(0.2, &mut r);
        s.update(0.2, &mut r);
        assert_eq!(s.iterate(), 0.37);
        assert_eq!(s.iteration(), 5);
    }

    #[test]
    fn gains_strictly_decrease() {
        let s = SpsaState::new(SpsaParams::default(), &mut rng(3));
        for k in 1..1000 {
            assert!(s.step_size(k + 1) < s.step_size(k));
            assert!(s.perturbation(k + 1) < s.perturbation(k));
        }
    }

    #[test]
    fn perturbation_sign_is_fair() {
        let mut r = rng(4);
        let n = 10_000;
        let plus = (0..n).filter(|_| draw_sign(&mut r) > 0.0).count();
        let f = plus as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    /// Drive SPSA with the deterministic response `g(ε) = c·ε` evaluated at
    /// the perturbed ε it asks for.
    fn run_synthetic(c: f64, updates: u64, seed: u64) -> (SpsaState, Vec<f64>) {
        let mut r = rng(seed);
        let mut s = SpsaState::new(SpsaParams::default(), &mut r);
        let mut responses = Vec::new();
        while s.iteration() <= updates {
            let g = (c * s.current()).clamp(0.0, 1.0);
            responses.push(g);
            s.update(g, &mut r);
        }
        (s, responses)
    }

    #[test]
    fn converges_on_linear_response() {
        for seed in 0..20 {
            let (s, _) = run_synthetic(1.0, 200, seed);
            assert!((s.iterate() - 0.1).abs() < 0.05, "seed {seed}: {}", s.iterate());
        }
    }

    #[test]
    fn long_run_response_hits_threshold() {
        for c in [0.5, 1.0, 2.0] {
            let (s, responses) = run_synthetic(c, 2000, 7);
            let tail = &responses[responses.len() / 2..];
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            assert!((mean - 0.1).abs() < 0.03, "c={c}: {mean}");
            assert!((s.iterate() - 0.1 / c).abs() < 0.05);
        }
    }

    #[test]
    fn window_ratio() {
        assert_eq!(record_collision_window(3, 30), Some(0.1));
        assert_eq!(record_collision_window(0, 50), Some(0.0));
        assert_eq!(record_collision_window(0, 0), None);

        let mut w = CollisionWindow::default();
        assert_eq!(w.record(1, 10, 25), None);
        assert_eq!(w.record(0, 10, 25), None);
        assert_eq!(w.record(2, 10, 25), Some(3.0 / 30.0));
        assert_eq!(w, CollisionWindow::default());
        assert_eq!(w.record(0, 100, 25), Some(0.0));
    }

    #[test]
    fn controller_only_steps_spsa() {
        let cfg = ExplorationConfig {
            window: 2,
            ..Default::default()
        };
        let mut r = rng(5);
        let mut fixed = ExplorationController::new(3, ScheduleKind::Constant, &cfg, &mut r);
        assert!(!fixed.record(0, 1, 1, &mut r));
        assert_eq!(fixed.epsilon(0, 9), 0.1);

        let mut spsa = ExplorationController::new(3, ScheduleKind::Spsa, &cfg, &mut r);
        assert!(!spsa.record(1, 1, 1, &mut r));
        assert!(spsa.record(1, 0, 1, &mut r));
        let ExplorationPolicy::Spsa(s) = spsa.policy(1) else { unreachable!() };
        assert_eq!(s.calls(), 2);
        let ExplorationPolicy::Spsa(s) = spsa.policy(0) else { unreachable!() };
        assert_eq!(s.calls(), 1);
    }

    proptest! {
        #[test]
        fn iterate_stays_in_unit_interval(
            seed in any::<u64>(),
            gs in proptest::collection::vec(0.0f64..=1.0, 1..400),
        ) {
            let mut r = rng(seed);
            let mut s = SpsaState::new(SpsaParams::default(), &mut r);
            for g in gs {
                s.update(g, &mut r);
                prop_assert!((0.0..=1.0).contains(&s.iterate()));
                prop_assert!((0.0..=1.0).contains(&s.current()));
            }
        }
    }
}
