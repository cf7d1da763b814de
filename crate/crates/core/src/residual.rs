//! Residual OFF-time prediction.
//!
//! Each channel keeps a Dirichlet posterior over quantized residual OFF
//! times `1..=K̄` (in frames). A prediction samples a categorical
//! distribution from the posterior, moves a fraction `ε` of its mass onto the
//! largest class `K̄`, and samples the number of frames to skip sensing from
//! the result. Observations arriving within a short hold window of the
//! previous one on the same channel are merged into a single, longer sample.
//!
//! [`ParametricResidualModel`] is the baseline: a Gamma posterior over an
//! exponential OFF rate with memoryless residuals.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    /// K̄: largest representable skip, in frames.
    pub support: usize,
    /// Observations starting within this many frames of the previous update
    /// on the same channel are merged with it.
    pub hold_window: u64,
    /// Symmetric Dirichlet pseudo-count.
    pub prior: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            support: 100,
            hold_window: 2,
            prior: 1.0,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support < 2 {
            return Err(invalid("residual.support", "must be >= 2"));
        }
        if !(self.prior > 0.0 && self.prior.is_finite()) {
            return Err(invalid("residual.prior", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Round half up to whole frames, clamp to `1..=K̄`. The flag reports
    /// whether the upper clamp was hit.
    pub fn quantize(&self, frames: f64) -> (usize, bool) {
        let k = (frames + 0.5).floor();
        if k > self.support as f64 {
            (self.support, true)
        } else if k < 1.0 {
            (1, false)
        } else {
            (k as usize, false)
        }
    }
}

/// Frames a device may transmit without sensing again; always in `1..=K̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SkipPrediction {
    pub t_skip: u32,
}

/// `(1-ε)·p + ε·δ(K̄)`, with `K̄` the last entry of `p`.
pub fn augment(p: &[f64], epsilon: f64) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|x| (1.0 - epsilon) * x).collect();
    if let Some(last) = out.last_mut() {
        *last += epsilon;
    }
    out
}

/// Draw `p ~ Dirichlet(alpha)` into `out`.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut Vec<f64>) {
    out.clear();
    let mut total = 0.0;
    for &a in alpha {
        let g = if a == 1.0 {
            Exp1.sample(rng)
        } else {
            Gamma::new(a, 1.0).expect("pseudo-counts are positive").sample(rng)
        };
        total += g;
        out.push(g);
    }
    if total > 0.0 {
        out.iter_mut().for_each(|g| *g /= total);
    } else {
        // Every gamma underflowed (tiny pseudo-counts); fall back to the mean.
        let s: f64 = alpha.iter().sum();
        out.iter_mut().zip(alpha).for_each(|(g, a)| *g = a / s);
    }
}

/// Index (0-based) drawn from the categorical `p` with a single uniform.
fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LastUpdate {
    class: usize,
    frame: u64,
    open: bool,
}

/// How an observation was folded into the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Plain { class: usize },
    Merged { from: usize, into: usize },
}

/// Per-channel Dirichlet posteriors over quantized residual OFF times.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    cfg: ResidualConfig,
    /// `alpha[c * K̄ + (k-1)]` is the pseudo-count of class `k` on channel `c`.
    alpha: Vec<f64>,
    last: Vec<Option<LastUpdate>>,
    truncations: u64,
    scratch: Vec<f64>,
}

impl ResidualModel {
    pub fn new(channels: usize, cfg: ResidualConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ResidualModel {
            cfg,
            alpha: vec![cfg.prior; channels * cfg.support],
            last: vec![None; channels],
            truncations: 0,
            scratch: Vec::with_capacity(cfg.support),
        })
    }

    pub fn config(&self) -> &ResidualConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.last.len()
    }

    /// Pseudo-counts of channel `c`, class 1 first.
    pub fn alpha(&self, channel: usize) -> &[f64] {
        let k = self.cfg.support;
        &self.alpha[channel * k..(channel + 1) * k]
    }

    fn alpha_mut(&mut self, channel: usize) -> &mut [f64] {
        let k = self.cfg.support;
        &mut self.alpha[channel * k..(channel + 1) * k]
    }

    /// Posterior mean `a_k / Σa` of channel `c`.
    pub fn posterior_mean(&self, channel: usize) -> Vec<f64> {
        let a = self.alpha(channel);
        let s: f64 = a.iter().sum();
        a.iter().map(|x| x / s).collect()
    }

    /// Observations whose class exceeded K̄ and was clamped.
    pub fn truncations(&self) -> u64 {
        self.truncations
    }

    fn check(&self, channel: usize) -> Result<()> {
        if channel >= self.channels() {
            Err(Error::UnknownChannel(channel))
        } else {
            Ok(())
        }
    }

    pub fn predict<R: Rng + ?Sized>(
        &mut self,
        channel: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<SkipPrediction> {
        self.check(channel)?;
        let epsilon = epsilon.clamp(0.0, 1.0);
        let k = self.cfg.support;
        let mut p = std::mem::take(&mut self.scratch);
        sample_dirichlet(&self.alpha[channel * k..(channel + 1) * k], rng, &mut p);
        // Augment in place.
        p.iter_mut().for_each(|x| *x *= 1.0 - epsilon);
        p[k - 1] += epsilon;
        let idx = sample_categorical(&p, rng);
        self.scratch = p;
        Ok(SkipPrediction {
            t_skip: idx as u32 + 1,
        })
    }

    /// Fold in a residual observation of `tau` frames that ended at frame
    /// `now` without the channel being reclaimed. If it started within the
    /// hold window after the previous update on `channel`, the two are merged
    /// into one longer sample: the earlier provisional count is retracted and
    /// the class of their sum is incremented instead.
    pub fn update(&mut self, channel: usize, tau: f64, now: u64) -> Result<UpdateKind> {
        self.observe(channel, tau, now, true)
    }

    /// Like [`update`](Self::update) for an observation that ended because
    /// the primary user returned. The sample still merges with an open
    /// predecessor, but nothing merges into it afterwards.
    pub fn update_terminal(&mut self, channel: usize, tau: f64, now: u64) -> Result<UpdateKind> {
        self.observe(channel, tau, now, false)
    }

    fn observe(&mut self, channel: usize, tau: f64, now: u64, open: bool) -> Result<UpdateKind> {
        self.check(channel)?;
        if !(tau > 0.0) {
            return Err(Error::NonPositiveResidual(tau));
        }
        let (k, truncated) = self.cfg.quantize(tau);
        if truncated {
            self.truncations += 1;
        }
        let support = self.cfg.support;
        let start = now.saturating_sub(k as u64);
        let merge_from = match self.last[channel] {
            Some(l) if l.open && start.saturating_sub(l.frame) <= self.cfg.hold_window => {
                Some(l.class)
            }
            _ => None,
        };
        let alpha = self.alpha_mut(channel);
        let kind = match merge_from {
            Some(j) => {
                let sum = j + k;
                let into = sum.min(support);
                alpha[j - 1] -= 1.0;
                alpha[into - 1] += 1.0;
                if sum > support {
                    self.truncations += 1;
                }
                UpdateKind::Merged { from: j, into }
            }
            None => {
                alpha[k - 1] += 1.0;
                UpdateKind::Plain { class: k }
            }
        };
        let class = match kind {
            UpdateKind::Plain { class } => class,
            UpdateKind::Merged { into, .. } => into,
        };
        self.last[channel] = Some(LastUpdate {
            class,
            frame: now,
            open,
        });
        Ok(kind)
    }
}

/// Baseline predictor: exponential OFF times with a conjugate Gamma prior
/// on the rate.
#[derive(Debug, Clone)]
pub struct ParametricResidualModel {
    shape: Vec<f64>,
    rate: Vec<f64>,
    support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParametricConfig {
    pub prior_shape: f64,
    /// Prior rate hyperparameter, in frames (prior mean OFF ≈ rate/shape).
    pub prior_rate: f64,
}

impl Default for ParametricConfig {
    fn default() -> Self {
        ParametricConfig {
            prior_shape: 1.0,
            prior_rate: 10.0,
        }
    }
}

impl ParametricResidualModel {
    pub fn new(channels: usize, cfg: ParametricConfig, support: usize) -> Result<Self> {
        if !(cfg.prior_shape > 0.0 && cfg.prior_rate > 0.0) {
            return Err(invalid("parametric", "prior shape and rate must be > 0"));
        }
        if support < 1 {
            return Err(invalid("residual.support", "must be >= 1"));
        }
        Ok(ParametricResidualModel {
            shape: vec![cfg.prior_shape; channels],
            rate: vec![cfg.prior_rate; channels],
            support,
        })
    }

    /// `(shape, rate)` of the posterior over the OFF rate of `channel`.
    pub fn posterior(&self, channel: usize) -> (f64, f64) {
        (self.shape[channel], self.rate[channel])
    }

    pub fn posterior_mean_rate(&self, channel: usize) -> f64 {
        self.shape[channel] / self.rate[channel]
    }

    pub fn set_posterior(&mut self, channel: usize, shape: f64, rate: f64) {
        self.shape[channel] = shape;
        self.rate[channel] = rate;
    }

    pub fn update(&mut self, channel: usize, tau: f64) -> Result<()> {
        if channel >= self.shape.len() {
            return Err(Error::UnknownChannel(channel));
        }
        if !(tau > 0.0) {
            return Err(Error::NonPositiveResidual(tau));
        }
        self.shape[channel] += 1.0;
        self.rate[channel] += tau;
        Ok(())
    }

    /// Sample a rate from the posterior, then an exponential residual with
    /// that rate, quantized to `1..=K̄`.
    pub fn predict<R: Rng + ?Sized>(&self, channel: usize, rng: &mut R) -> Result<SkipPrediction> {
        if channel >= self.shape.len() {
            return Err(Error::UnknownChannel(channel));
        }
        let lambda = Gamma::new(self.shape[channel], 1.0 / self.rate[channel])
            .map_err(|e| invalid("parametric", e.to_string()))?
            .sample(rng);
        let e: f64 = Exp1.sample(rng);
        let x = e / lambda;
        let k = if x.is_finite() { (x + 0.5).floor() } else { f64::MAX };
        let t = k.clamp(1.0, self.support as f64) as u32;
        Ok(SkipPrediction { t_skip: t })
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

    fn model(support: usize) -> ResidualModel {
        ResidualModel::new(
            2,
            ResidualConfig {
                support,
                hold_window: 2,
                prior: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn quantize_rounds_half_up_and_clamps() {
        let cfg = ResidualConfig::default();
        assert_eq!(cfg.quantize(2.5), (3, false));
        assert_eq!(cfg.quantize(2.49), (2, false));
        assert_eq!(cfg.quantize(0.2), (1, false));
        assert_eq!(cfg.quantize(1e6), (100, true));
    }

    #[test]
    fn full_exploration_always_returns_support() {
        let mut m = model(20);
        let mut r = rng(1);
        for _ in 0..1000 {
            assert_eq!(m.predict(0, 1.0, &mut r).unwrap().t_skip, 20);
        }
    }

    #[test]
    fn flat_prior_predicts_uniformly() {
        let k = 10;
        let mut m = model(k);
        let mut r = rng(2);
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[m.predict(1, 0.0, &mut r).unwrap().t_skip as usize - 1] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.1).abs() < 0.006, "{f}");
        }
    }

    #[test]
    fn augmented_tail_probability() {
        let k = 100;
        let mut m = model(k);
        m.alpha_mut(0)[0] = 100.0;
        let mut r = rng(3);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| m.predict(0, 0.2, &mut r).unwrap().t_skip as usize == k)
            .count();
        let expect = 0.2 + 0.8 / (k as f64 + 99.0);
        let got = hits as f64 / n as f64;
        assert!((got - expect).abs() < 0.005, "{got} vs {expect}");
    }

    #[test]
    fn concentrated_posterior_mode() {
        let mut m = model(30);
        m.alpha_mut(0)[6] = 5000.0;
        let mut r = rng(4);
        let mut counts = vec![0usize; 30];
        for _ in 0..10_000 {
            counts[m.predict(0, 0.0, &mut r).unwrap().t_skip as usize - 1] += 1;
        }
        let mode = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0 + 1;
        assert_eq!(mode, 7);
    }

    #[test]
    fn plain_update_increments_one_class() {
        let mut m = model(10);
        assert_eq!(m.update(0, 3.0, 100).unwrap(), UpdateKind::Plain { class: 3 });
        let a = m.alpha(0);
        assert_eq!(a[2], 2.0);
        assert_eq!(a.iter().sum::<f64>(), 11.0);
        assert!(m.alpha(1).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn updates_within_hold_window_merge() {
        let mut m = model(10);
        m.update(0, 3.0, 10).unwrap();
        // Frames 11..=14: starts right after the previous update.
        assert_eq!(
            m.update(0, 4.0, 14).unwrap(),
            UpdateKind::Merged { from: 3, into: 7 }
        );
        let a = m.alpha(0);
        assert_eq!(a[2], 1.0);
        assert_eq!(a[6], 2.0);
        assert_eq!(a.iter().sum::<f64>(), 11.0);
        // A chain keeps growing and saturates at K̄.
        assert_eq!(
            m.update(0, 5.0, 20).unwrap(),
            UpdateKind::Merged { from: 7, into: 10 }
        );
        assert_eq!(m.truncations(), 1);
        // Outside the hold window: plain again.
        assert_eq!(m.update(0, 2.0, 40).unwrap(), UpdateKind::Plain { class: 2 });
    }

    #[test]
    fn terminal_update_closes_the_chain() {
        let mut m = model(10);
        m.update(0, 2.0, 10).unwrap();
        assert_eq!(
            m.update_terminal(0, 1.0, 11).unwrap(),
            UpdateKind::Merged { from: 2, into: 3 }
        );
        assert_eq!(m.update(0, 2.0, 13).unwrap(), UpdateKind::Plain { class: 2 });
    }

    #[test]
    fn rejects_non_positive_tau() {
        let mut m = model(10);
        assert!(matches!(m.update(0, 0.0, 1), Err(Error::NonPositiveResidual(_))));
        assert!(matches!(m.update(0, -2.0, 1), Err(Error::NonPositiveResidual(_))));
        assert!(matches!(m.update(5, 1.0, 1), Err(Error::UnknownChannel(5))));
    }

    #[test]
    fn posterior_mean_tracks_true_pmf() {
        let k = 8;
        let truth = [0.05, 0.1, 0.3, 0.2, 0.15, 0.1, 0.05, 0.05];
        let mut m = ResidualModel::new(
            1,
            ResidualConfig {
                support: k,
                hold_window: 0,
                prior: 1.0,
            },
        )
        .unwrap();
        let mut r = rng(5);
        let mut counts = vec![0.0; k];
        for i in 0..10_000u64 {
            let class = sample_categorical(&truth, &mut r) + 1;
            counts[class - 1] += 1.0;
            // Spaced far apart so nothing merges.
            m.update(0, class as f64, i * 1000 + 500).unwrap();
        }
        // Exact identity: posterior = prior + counts.
        for (a, c) in m.alpha(0).iter().zip(&counts) {
            assert_eq!(*a, 1.0 + c);
        }
        let tv: f64 = m
            .posterior_mean(0)
            .iter()
            .zip(&truth)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn parametric_degenerate_posterior_mean_skip() {
        let mut m = ParametricResidualModel::new(1, ParametricConfig::default(), 1000).unwrap();
        m.set_posterior(0, 1e7, 2e8);
        let mut r = rng(6);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| m.predict(0, &mut r).unwrap().t_skip as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 20.0).abs() / 20.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn parametric_prior_predictive() {
        // Gamma(1, 10) prior on the rate: P(X > x) = (10 / (10 + x)).
        let m = ParametricResidualModel::new(1, ParametricConfig::default(), 10_000).unwrap();
        let mut r = rng(7);
        let n = 100_000;
        let over = (0..n)
            .filter(|_| m.predict(0, &mut r).unwrap().t_skip > 10)
            .count();
        // t_skip > 10 iff x >= 10.5 after rounding.
        let expect = 10.0 / 20.5;
        let got = over as f64 / n as f64;
        assert!((got - expect).abs() < 0.01, "{got} vs {expect}");
    }

    #[test]
    fn parametric_posterior_concentrates() {
        let mut m = ParametricResidualModel::new(1, ParametricConfig::default(), 100).unwrap();
        let mut r = rng(8);
        for _ in 0..10_000 {
            let e: f64 = Exp1.sample(&mut r);
            m.update(0, 50.0 * e).unwrap();
        }
        let rate = m.posterior_mean_rate(0);
        assert!((rate - 0.02).abs() / 0.02 < 0.05, "rate {rate}");
    }

    proptest! {
        #[test]
        fn augmented_distribution_sums_to_one(
            raw in proptest::collection::vec(0.0f64..10.0, 2..200),
            eps in 0.0f64..=1.0,
        ) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 0.0);
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let q = augment(&p, eps);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn predictions_stay_in_support(seed in any::<u64>(), eps in 0.0f64..=1.0, k in 2usize..50) {
            let mut m = model(k);
            let mut r = rng(seed);
            for _ in 0..20 {
                let t = m.predict(0, eps, &mut r).unwrap().t_skip as usize;
                prop_assert!((1..=k).contains(&t));
            }
        }

        #[test]
        fn merging_preserves_sample_count(
            seed in any::<u64>(),
            steps in proptest::collection::vec((1.0f64..30.0, 0u64..6, any::<bool>()), 1..200),
        ) {
            let _ = seed;
            let mut m = model(25);
            let prior_total: f64 = m.alpha(0).iter().sum();
            let mut now = 0u64;
            let mut plain = 0usize;
            for (tau, gap, terminal) in steps {
                now += gap + tau.round().max(1.0) as u64;
                let kind = if terminal {
                    m.update_terminal(0, tau, now).unwrap()
                } else {
                    m.update(0, tau, now).unwrap()
                };
                if matches!(kind, UpdateKind::Plain { .. }) {
                    plain += 1;
                }
                prop_assert!(m.alpha(0).iter().all(|&a| a > 0.0));
            }
            let total: f64 = m.alpha(0).iter().sum();
            prop_assert_eq!(total - prior_total, plain as f64);
        }
    }
}
