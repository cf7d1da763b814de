//! Primary-user and secondary-user traffic.
//!
//! Primary users alternate between ON and OFF periods drawn from a
//! continuous-time renewal model (generalized Pareto, hyper-exponential or
//! plain exponential). All durations are expressed in frame periods.
//! Secondary (IoT) users generate either periodic or event-driven demand,
//! quantized to whole frames.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest duration a renewal period may take. Keeps `time_remaining > 0`.
const MIN_DURATION: f64 = 1e-9;

/// Generalized Pareto parameters: shape `k`, scale `σ`, location `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
}

impl GpdParams {
    pub fn new(shape: f64, scale: f64, location: f64) -> Result<Self> {
        let p = GpdParams {
            shape,
            scale,
            location,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape >= 0.0 && self.shape.is_finite()) {
            return Err(invalid("gpd.shape", "must be finite and >= 0"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid("gpd.scale", "must be finite and > 0"));
        }
        if !(self.location >= 0.0 && self.location.is_finite()) {
            return Err(invalid("gpd.location", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// `θ + σ/(1-k)`; infinite for `k >= 1`.
    pub fn mean(&self) -> f64 {
        if self.shape >= 1.0 {
            f64::INFINITY
        } else {
            self.location + self.scale / (1.0 - self.shape)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.location {
            return 0.0;
        }
        let z = (x - self.location) / self.scale;
        if self.shape == 0.0 {
            1.0 - (-z).exp()
        } else {
            1.0 - (1.0 + self.shape * z).powf(-1.0 / self.shape)
        }
    }

    /// Inverse CDF evaluated at the upper-tail probability `u ∈ (0, 1]`.
    pub fn quantile_upper(&self, u: f64) -> f64 {
        if self.shape == 0.0 {
            self.location - self.scale * u.ln()
        } else {
            self.location + self.scale / self.shape * (u.powf(-self.shape) - 1.0)
        }
    }
}

/// Draw one generalized Pareto duration by inversion.
pub fn sample_gpd<R: Rng + ?Sized>(params: &GpdParams, rng: &mut R) -> f64 {
    // random::<f64>() is in [0, 1); flip it so u is in (0, 1].
    let u = 1.0 - rng.random::<f64>();
    params.quantile_upper(u)
}

/// Hyper-exponential OFF mixture with an exponential ON period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub mean_on: f64,
}

impl HedParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, mean_on: f64) -> Result<Self> {
        let p = HedParams {
            weights,
            means,
            mean_on,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(invalid(
                "hed.weights",
                "must be non-empty and match hed.means in length",
            ));
        }
        if self.weights.iter().any(|&p| !(p >= 0.0)) {
            return Err(invalid("hed.weights", "entries must be >= 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("hed.weights", format!("must sum to 1, got {total}")));
        }
        if self.means.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(invalid("hed.means", "entries must be finite and > 0"));
        }
        if !(self.mean_on > 0.0 && self.mean_on.is_finite()) {
            return Err(invalid("hed.mean_on", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn mean_off(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(p, m)| p * m)
            .sum()
    }
}

fn sample_exponential<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    mean * e
}

/// Pick a mixture component with probability `p_i`, then draw Exp(mean `μ_i`).
pub fn sample_hed_off<R: Rng + ?Sized>(params: &HedParams, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &p) in params.weights.iter().enumerate() {
        acc += p;
        if p > 0.0 && u < acc {
            chosen = Some(i);
            break;
        }
    }
    // Rounding can leave u just above the accumulated sum; fall back to the
    // last component that carries any weight.
    let i = chosen.unwrap_or_else(|| {
        params
            .weights
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("validated weights sum to one")
    });
    sample_exponential(params.means[i], rng)
}

/// ON/OFF duration model of one primary user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PuTrafficModel {
    Gpd { on: GpdParams, off: GpdParams },
    Hed(HedParams),
    Exponential { mean_on: f64, mean_off: f64 },
}

impl PuTrafficModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            PuTrafficModel::Gpd { on, off } => {
                on.validate()?;
                off.validate()
            }
            PuTrafficModel::Hed(h) => h.validate(),
            PuTrafficModel::Exponential { mean_on, mean_off } => {
                if !(*mean_on > 0.0 && mean_on.is_finite()) {
                    return Err(invalid("exponential.mean_on", "must be finite and > 0"));
                }
                if !(*mean_off > 0.0 && mean_off.is_finite()) {
                    return Err(invalid("exponential.mean_off", "must be finite and > 0"));
                }
                Ok(())
            }
        }
    }

    /// The exponential model as a one-component hyper-exponential.
    pub fn to_hed(&self) -> Option<HedParams> {
        match self {
            PuTrafficModel::Exponential { mean_on, mean_off } => Some(HedParams {
                weights: vec![1.0],
                means: vec![*mean_off],
                mean_on: *mean_on,
            }),
            PuTrafficModel::Hed(h) => Some(h.clone()),
            PuTrafficModel::Gpd { .. } => None,
        }
    }

    pub fn mean_on(&self) -> f64 {
        match self {
            PuTrafficModel::Gpd { on, .. } => on.mean(),
            PuTrafficModel::Hed(h) => h.mean_on,
            PuTrafficModel::Exponential { mean_on, .. } => *mean_on,
        }
    }

    pub fn mean_off(&self) -> f64 {
        match self {
            PuTrafficModel::Gpd { off, .. } => off.mean(),
            PuTrafficModel::Hed(h) => h.mean_off(),
            PuTrafficModel::Exponential { mean_off, .. } => *mean_off,
        }
    }

    /// Long-run fraction of time the primary user is active.
    pub fn occupancy(&self) -> f64 {
        let on = self.mean_on();
        on / (on + self.mean_off())
    }

    pub fn sample_on<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = match self {
            PuTrafficModel::Gpd { on, .. } => sample_gpd(on, rng),
            PuTrafficModel::Hed(h) => sample_exponential(h.mean_on, rng),
            PuTrafficModel::Exponential { mean_on, .. } => sample_exponential(*mean_on, rng),
        };
        x.max(MIN_DURATION)
    }

    pub fn sample_off<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = match self {
            PuTrafficModel::Gpd { off, .. } => sample_gpd(off, rng),
            PuTrafficModel::Hed(h) => sample_hed_off(h, rng),
            PuTrafficModel::Exponential { mean_off, .. } => sample_exponential(*mean_off, rng),
        };
        x.max(MIN_DURATION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PuState {
    Active,
    Idle,
}

impl PuState {
    fn toggled(self) -> Self {
        match self {
            PuState::Active => PuState::Idle,
            PuState::Idle => PuState::Active,
        }
    }
}

/// What a collision does to the primary user's ON period.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Retransmit from scratch: draw a fresh ON duration.
    #[default]
    Restart,
    /// Keep the remaining ON time unchanged.
    Resume,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// Offset from the start of the `advance` call, in frame periods.
    pub offset: f64,
    /// Absolute process time of the change.
    pub time: f64,
    pub state: PuState,
}

/// Stateful ON/OFF renewal process of one licensed channel.
#[derive(Debug, Clone)]
pub struct PuProcess {
    model: PuTrafficModel,
    state: PuState,
    /// Process time reached so far.
    clock: f64,
    /// Process time of the next state change: the running sum of drawn
    /// durations, so it does not depend on how time was stepped.
    boundary: f64,
    collision_mode: CollisionMode,
    /// Renewal draws taken from the traffic stream so far.
    draws: u64,
}

impl PuProcess {
    /// Start in a state chosen with the model's stationary occupancy and a
    /// fresh duration for that state.
    pub fn new<R: Rng + ?Sized>(
        model: PuTrafficModel,
        collision_mode: CollisionMode,
        rng: &mut R,
    ) -> Self {
        let state = if rng.random::<f64>() < model.occupancy() {
            PuState::Active
        } else {
            PuState::Idle
        };
        let mut p = PuProcess {
            model,
            state,
            clock: 0.0,
            boundary: 0.0,
            collision_mode,
            draws: 0,
        };
        p.boundary = p.draw_for(state, rng);
        p
    }

    pub fn with_state(
        model: PuTrafficModel,
        state: PuState,
        remaining: f64,
        collision_mode: CollisionMode,
    ) -> Self {
        assert!(remaining > 0.0, "time remaining must be positive");
        PuProcess {
            model,
            state,
            clock: 0.0,
            boundary: remaining,
            collision_mode,
            draws: 0,
        }
    }

    fn draw_for<R: Rng + ?Sized>(&mut self, state: PuState, rng: &mut R) -> f64 {
        self.draws += 1;
        match state {
            PuState::Active => self.model.sample_on(rng),
            PuState::Idle => self.model.sample_off(rng),
        }
    }

    pub fn model(&self) -> &PuTrafficModel {
        &self.model
    }

    pub fn state(&self) -> PuState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == PuState::Active
    }

    pub fn time_remaining(&self) -> f64 {
        self.boundary - self.clock
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Process time at which the current state ends.
    pub fn next_transition(&self) -> f64 {
        self.boundary
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Consume `dt` of simulated time, reporting every state change.
    pub fn advance_with<R, F>(&mut self, dt: f64, rng: &mut R, on_transition: F)
    where
        R: Rng + ?Sized,
        F: FnMut(Transition),
    {
        debug_assert!(dt >= 0.0);
        self.advance_to_with(self.clock + dt, rng, on_transition);
    }

    /// Move the process clock to the absolute time `until`.
    pub fn advance_to_with<R, F>(&mut self, until: f64, rng: &mut R, mut on_transition: F)
    where
        R: Rng + ?Sized,
        F: FnMut(Transition),
    {
        debug_assert!(until >= self.clock);
        let start = self.clock;
        while self.boundary <= until {
            let at = self.boundary;
            self.state = self.state.toggled();
            self.boundary = at + self.draw_for(self.state, rng);
            on_transition(Transition {
                offset: at - start,
                time: at,
                state: self.state,
            });
        }
        self.clock = until;
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> Vec<Transition> {
        let mut out = Vec::new();
        self.advance_with(dt, rng, |t| out.push(t));
        out
    }

    /// A secondary user collided with the ongoing ON period.
    ///
    /// The retransmission draw comes from `rng`, which callers keep separate
    /// from the renewal stream so that nominal durations stay paired across
    /// compared policies.
    pub fn notify_collision<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.state != PuState::Active {
            return Err(Error::CollisionWhileIdle);
        }
        if self.collision_mode == CollisionMode::Restart {
            self.boundary = self.clock + self.model.sample_on(rng);
        }
        Ok(())
    }
}

/// Secondary-user traffic class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuTrafficParams {
    /// `on` frames of payload every `interval` frames.
    Periodic { on: u32, interval: u32 },
    /// Fires with `alarm_prob` per idle frame; payload is Exp(`mean_on`)
    /// frames, rounded up.
    EventDriven { alarm_prob: f64, mean_on: f64 },
}

impl SuTrafficParams {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SuTrafficParams::Periodic { on, interval } => {
                if interval == 0 {
                    return Err(invalid("su.interval", "must be >= 1"));
                }
                if on > interval {
                    return Err(invalid("su.on", "must not exceed su.interval"));
                }
            }
            SuTrafficParams::EventDriven {
                alarm_prob,
                mean_on,
            } => {
                if !(0.0..=1.0).contains(&alarm_prob) {
                    return Err(invalid("su.alarm_prob", "must lie in [0, 1]"));
                }
                if !(mean_on > 0.0 && mean_on.is_finite()) {
                    return Err(invalid("su.mean_on", "must be finite and > 0"));
                }
            }
        }
        Ok(())
    }
}

/// Payload demand (frames) offered at `frame`.
///
/// Event-driven sources consume exactly two draws per call whether or not
/// the alarm fires, so the device stream stays aligned across policies that
/// keep the device busy for different spans. Callers drop the demand when
/// the device is not idle.
pub fn su_generate<R: Rng + ?Sized>(params: &SuTrafficParams, frame: u64, rng: &mut R) -> u32 {
    match *params {
        SuTrafficParams::Periodic { on, interval } => {
            if frame % interval as u64 == 0 {
                on
            } else {
                0
            }
        }
        SuTrafficParams::EventDriven {
            alarm_prob,
            mean_on,
        } => {
            let fire = rng.random::<f64>() < alarm_prob;
            let len = sample_exponential(mean_on, rng);
            if fire {
                (len.ceil() as u32).max(1)
            } else {
                0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gpd_upper_tail_one_is_location() {
        for k in [0.0, 0.1, 0.5, 2.0] {
            let p = GpdParams::new(k, 500.0, 73.0).unwrap();
            assert_eq!(p.quantile_upper(1.0), 73.0);
        }
    }

    #[test]
    fn gpd_zero_shape_is_shifted_exponential() {
        let p = GpdParams::new(0.0, 500.0, 50.0).unwrap();
        let mut r = rng(1);
        let n = 200_000;
        let mean = (0..n).map(|_| sample_gpd(&p, &mut r)).sum::<f64>() / n as f64;
        assert!((mean - 550.0).abs() / 550.0 < 0.02, "mean {mean}");
        assert!((p.cdf(550.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn gpd_rejects_bad_params() {
        assert!(GpdParams::new(-0.1, 1.0, 0.0).is_err());
        assert!(GpdParams::new(0.1, 0.0, 0.0).is_err());
        assert!(GpdParams::new(0.1, 1.0, -1.0).is_err());
    }

    #[test]
    fn hed_single_component_is_exponential() {
        let h = HedParams::new(vec![1.0], vec![200.0], 10.0).unwrap();
        let mut r = rng(2);
        let n = 200_000;
        let mean = (0..n).map(|_| sample_hed_off(&h, &mut r)).sum::<f64>() / n as f64;
        assert!((mean - 200.0).abs() / 200.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn hed_zero_weight_component_never_drawn() {
        let h = HedParams::new(vec![1.0, 0.0], vec![50.0, 999.0], 10.0).unwrap();
        let mut r = rng(3);
        // Exp(50) exceeding 1500 has probability e^-30.
        assert!((0..100_000).all(|_| sample_hed_off(&h, &mut r) < 1500.0));
    }

    #[test]
    fn hed_validation() {
        assert!(HedParams::new(vec![0.5, 0.4], vec![1.0, 2.0], 1.0).is_err());
        assert!(HedParams::new(vec![0.5, 0.5], vec![1.0], 1.0).is_err());
        assert!(HedParams::new(vec![1.0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn exponential_is_single_component_hed() {
        let m = PuTrafficModel::Exponential {
            mean_on: 20.0,
            mean_off: 80.0,
        };
        let h = m.to_hed().unwrap();
        assert_eq!(h.weights, vec![1.0]);
        assert_eq!(h.means, vec![80.0]);
        assert_eq!(h.mean_on, 20.0);
        assert!((m.occupancy() - 0.2).abs() < 1e-12);
    }

    fn exp_model() -> PuTrafficModel {
        PuTrafficModel::Exponential {
            mean_on: 3.0,
            mean_off: 4.0,
        }
    }

    #[test]
    fn advance_without_boundary() {
        let mut p = PuProcess::with_state(exp_model(), PuState::Idle, 5.0, CollisionMode::Restart);
        let t = p.advance(3.0, &mut rng(4));
        assert!(t.is_empty());
        assert!((p.time_remaining() - 2.0).abs() < 1e-12);
        assert_eq!(p.state(), PuState::Idle);
    }

    #[test]
    fn advance_across_one_boundary() {
        let mut p = PuProcess::with_state(
            PuTrafficModel::Exponential {
                mean_on: 1e6,
                mean_off: 1.0,
            },
            PuState::Idle,
            1.0,
            CollisionMode::Restart,
        );
        let t = p.advance(2.0, &mut rng(5));
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].state, PuState::Active);
        assert!((t[0].offset - 1.0).abs() < 1e-12);
    }

    #[test]
    fn long_advance_matches_fine_steps() {
        let mut coarse = PuProcess::with_state(exp_model(), PuState::Idle, 0.7, CollisionMode::Restart);
        let mut fine = coarse.clone();
        let mut r1 = rng(6);
        let mut r2 = rng(6);
        let horizon = 500.0;
        let big = coarse.advance(horizon, &mut r1);

        let step = 0.01;
        let mut small = Vec::new();
        for i in 0..(horizon / step).round() as usize {
            let base = i as f64 * step;
            for t in fine.advance(step, &mut r2) {
                small.push(Transition {
                    offset: base + t.offset,
                    ..t
                });
            }
        }
        assert!(big.len() > 50);
        assert_eq!(big.len(), small.len());
        for (a, b) in big.iter().zip(&small) {
            assert_eq!(a.state, b.state);
            assert!((a.offset - b.offset).abs() < 1e-6);
        }
        for w in big.windows(2) {
            assert_ne!(w[0].state, w[1].state);
        }
        assert_eq!(coarse.draws(), fine.draws());
    }

    #[test]
    fn collision_restarts_on_period() {
        let model = PuTrafficModel::Exponential {
            mean_on: 50.0,
            mean_off: 50.0,
        };
        let mut p = PuProcess::with_state(model, PuState::Active, 0.3, CollisionMode::Restart);
        let mut r = rng(7);
        let mut expect_rng = rng(7);
        p.notify_collision(&mut r).unwrap();
        let fresh = p.model().sample_on(&mut expect_rng);
        assert_eq!(p.state(), PuState::Active);
        assert_eq!(p.time_remaining(), fresh);
    }

    #[test]
    fn collision_resume_keeps_remaining() {
        let mut p = PuProcess::with_state(exp_model(), PuState::Active, 0.3, CollisionMode::Resume);
        p.notify_collision(&mut rng(8)).unwrap();
        assert_eq!(p.time_remaining(), 0.3);
    }

    #[test]
    fn collision_while_idle_is_an_error() {
        let mut p = PuProcess::with_state(exp_model(), PuState::Idle, 0.3, CollisionMode::Restart);
        assert!(matches!(
            p.notify_collision(&mut rng(9)),
            Err(Error::CollisionWhileIdle)
        ));
    }

    #[test]
    fn repeated_collisions_keep_pu_active() {
        let model = PuTrafficModel::Exponential {
            mean_on: 0.5,
            mean_off: 10.0,
        };
        let mut p = PuProcess::with_state(model, PuState::Active, 0.5, CollisionMode::Restart);
        let mut traffic = rng(10);
        let mut retx = rng(11);
        // Every frame the SU hits the PU just before its ON period could end.
        for _ in 0..1000 {
            p.notify_collision(&mut retx).unwrap();
            let step = (p.time_remaining() * 0.5).min(1.0);
            assert!(p.advance(step, &mut traffic).is_empty());
            assert!(p.is_active());
        }
    }

    #[test]
    fn periodic_demand() {
        let p = SuTrafficParams::Periodic { on: 5, interval: 100 };
        let mut r = rng(12);
        assert_eq!(su_generate(&p, 200, &mut r), 5);
        assert_eq!(su_generate(&p, 201, &mut r), 0);
        assert_eq!(su_generate(&p, 0, &mut r), 5);
    }

    #[test]
    fn event_driven_rate_and_rounding() {
        let p = SuTrafficParams::EventDriven {
            alarm_prob: 0.05,
            mean_on: 10.0,
        };
        let mut r = rng(13);
        let n = 100_000;
        let demands: Vec<u32> = (0..n).map(|t| su_generate(&p, t, &mut r)).collect();
        let fired = demands.iter().filter(|&&d| d > 0).count();
        let rate = fired as f64 / n as f64;
        assert!((rate - 0.05).abs() < 0.004, "rate {rate}");
        assert!(demands.iter().all(|&d| d == 0 || d >= 1));
    }

    #[test]
    fn su_params_validation() {
        assert!(SuTrafficParams::Periodic { on: 6, interval: 5 }.validate().is_err());
        assert!(SuTrafficParams::EventDriven {
            alarm_prob: 1.5,
            mean_on: 1.0
        }
        .validate()
        .is_err());
    }
}
