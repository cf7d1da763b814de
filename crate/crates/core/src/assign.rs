//! Channel assignment: a device-by-channel value table learned from
//! throughput feedback, and random-restart hill climbing over assignments
//! with ε-greedy exploration of the initial configuration.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Exponentially smoothed quality `V[c][d]` of giving channel `c` to device `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    channels: usize,
    devices: usize,
    learning_rate: f64,
    values: Vec<f64>,
}

impl ValueTable {
    /// All entries start at zero.
    pub fn new(channels: usize, devices: usize, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate <= 1.0) {
            return Err(invalid("assign.learning_rate", "must lie in (0, 1]"));
        }
        Ok(ValueTable {
            channels,
            devices,
            learning_rate,
            values: vec![0.0; channels * devices],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    #[inline]
    pub fn get(&self, channel: usize, device: usize) -> f64 {
        self.values[channel * self.devices + device]
    }

    pub fn set(&mut self, channel: usize, device: usize, value: f64) -> Result<()> {
        self.check(channel, device)?;
        self.values[channel * self.devices + device] = value;
        Ok(())
    }

    fn check(&self, channel: usize, device: usize) -> Result<()> {
        if device >= self.devices {
            return Err(Error::UnknownDevice(device));
        }
        if channel >= self.channels {
            return Err(Error::UnknownChannel(channel));
        }
        Ok(())
    }

    /// `V ← κ·T + (1-κ)·V` for the single pair `(channel, device)`.
    /// A failed transmission is reported as `throughput = 0`.
    pub fn update(&mut self, device: usize, channel: usize, throughput: f64) -> Result<()> {
        self.check(channel, device)?;
        debug_assert!(throughput >= 0.0);
        let k = self.learning_rate;
        let v = &mut self.values[channel * self.devices + device];
        *v = k * throughput + (1.0 - k) * *v;
        Ok(())
    }
}

/// Partial injective mapping of waiting devices onto channels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Self {
        Assignment { pairs }
    }

    /// `(device, channel)` pairs.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn channel_of(&self, device: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(d, _)| *d == device)
            .map(|&(_, c)| c)
    }

    /// Sum of `V[c][d]` over the assigned pairs.
    pub fn quality(&self, table: &ValueTable) -> f64 {
        self.pairs.iter().map(|&(d, c)| table.get(c, d)).sum()
    }

    /// No channel and no device appears twice.
    pub fn is_injective(&self) -> bool {
        let mut ch: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        let mut dev: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        ch.sort_unstable();
        dev.sort_unstable();
        ch.windows(2).all(|w| w[0] != w[1]) && dev.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    /// η: probability of keeping the random starting configuration.
    pub exploration: f64,
    /// κ: value-table learning rate.
    pub learning_rate: f64,
    /// Consecutive non-improving proposals allowed per waiting device per
    /// channel before the climb stops.
    pub stall_factor: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            exploration: 0.2,
            learning_rate: 0.5,
            stall_factor: 5,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(invalid("assign.exploration", "must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(invalid("assign.learning_rate", "must lie in (0, 1]"));
        }
        if self.stall_factor == 0 {
            return Err(invalid("assign.stall_factor", "must be >= 1"));
        }
        Ok(())
    }

    pub fn max_stall(&self, waiting: usize, channels: usize) -> usize {
        (self.stall_factor * waiting * channels).max(1)
    }
}

/// Full record of one climb, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct Climb {
    pub initial: Assignment,
    pub climbed: Assignment,
    pub initial_quality: f64,
    pub climbed_quality: f64,
    /// Quality after every accepted proposal, starting with the initial one.
    pub accepted: Vec<f64>,
    pub proposals: usize,
}

/// Search state: waiting devices and candidate channels padded with dummies
/// to a common size `s`, so that every assignment is a permutation and every
/// neighbour is a transposition. Swapping two real devices exchanges their
/// channels; swapping with a dummy device moves a device onto an unused
/// channel; swapping with a dummy channel benches a device in favour of an
/// unassigned one.
struct Search<'a> {
    waiting: &'a [usize],
    channels: &'a [usize],
    /// `local[i * m + j]` = V[channels[j]][waiting[i]].
    local: Vec<f64>,
    /// Device slot -> channel slot.
    perm: Vec<usize>,
}

impl<'a> Search<'a> {
    fn new(table: &ValueTable, waiting: &'a [usize], channels: &'a [usize]) -> Self {
        let m = channels.len();
        let mut local = Vec::with_capacity(waiting.len() * m);
        for &d in waiting {
            for &c in channels {
                local.push(table.get(c, d));
            }
        }
        let s = waiting.len().max(m);
        Search {
            waiting,
            channels,
            local,
            perm: (0..s).collect(),
        }
    }

    #[inline]
    fn value(&self, slot: usize, ch: usize) -> f64 {
        if slot < self.waiting.len() && ch < self.channels.len() {
            self.local[slot * self.channels.len() + ch]
        } else {
            0.0
        }
    }

    fn quality(&self) -> f64 {
        (0..self.perm.len()).map(|i| self.value(i, self.perm[i])).sum()
    }

    fn swap_delta(&self, i: usize, j: usize) -> f64 {
        let (pi, pj) = (self.perm[i], self.perm[j]);
        self.value(i, pj) + self.value(j, pi) - self.value(i, pi) - self.value(j, pj)
    }

    fn assignment(&self) -> Assignment {
        let m = self.channels.len();
        let pairs = self
            .waiting
            .iter()
            .enumerate()
            .filter(|&(i, _)| self.perm[i] < m)
            .map(|(i, &d)| (d, self.channels[self.perm[i]]))
            .collect();
        Assignment { pairs }
    }

    fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.perm.shuffle(rng);
    }

    /// Accept swaps that do not lower quality; stop after `max_stall`
    /// consecutive proposals without strict improvement, or after
    /// `50 * max_stall` proposals in total.
    fn climb<R, F>(&mut self, max_stall: usize, rng: &mut R, mut on_accept: F) -> usize
    where
        R: Rng + ?Sized,
        F: FnMut(f64),
    {
        let s = self.perm.len();
        if s < 2 {
            return 0;
        }
        let cap = max_stall.saturating_mul(50);
        let mut quality = self.quality();
        let mut stall = 0;
        let mut proposals = 0;
        while stall < max_stall && proposals < cap {
            proposals += 1;
            let i = rng.random_range(0..s);
            let mut j = rng.random_range(0..s - 1);
            if j >= i {
                j += 1;
            }
            let delta = self.swap_delta(i, j);
            if delta >= 0.0 {
                self.perm.swap(i, j);
                quality += delta;
                on_accept(quality);
            }
            if delta > 0.0 {
                stall = 0;
            } else {
                stall += 1;
            }
        }
        proposals
    }
}

/// Assign channels to waiting devices.
///
/// With probability η the uniformly random starting configuration is
/// returned untouched; otherwise it is improved by hill climbing. When there
/// are more waiting devices than channels, only `channels.len()` devices are
/// assigned and the rest keep waiting.
pub fn hill_climb<R: Rng + ?Sized>(
    table: &ValueTable,
    waiting: &[usize],
    channels: &[usize],
    rng: &mut R,
    cfg: &AssignConfig,
) -> Assignment {
    if waiting.is_empty() || channels.is_empty() {
        return Assignment::default();
    }
    let mut search = Search::new(table, waiting, channels);
    search.shuffle(rng);
    let explore = rng.random::<f64>() < cfg.exploration;
    if !explore {
        let max_stall = cfg.max_stall(waiting.len(), channels.len());
        search.climb(max_stall, rng, |_| {});
    }
    search.assignment()
}

/// Run the climb to completion and report both the starting and the climbed
/// configuration; the η draw is not taken here.
pub fn hill_climb_detailed<R: Rng + ?Sized>(
    table: &ValueTable,
    waiting: &[usize],
    channels: &[usize],
    rng: &mut R,
    cfg: &AssignConfig,
) -> Climb {
    let mut search = Search::new(table, waiting, channels);
    search.shuffle(rng);
    let initial = search.assignment();
    let initial_quality = search.quality();
    let mut accepted = vec![initial_quality];
    let max_stall = cfg.max_stall(waiting.len(), channels.len());
    let proposals = search.climb(max_stall, rng, |q| accepted.push(q));
    Climb {
        initial,
        climbed: search.assignment(),
        initial_quality,
        climbed_quality: search.quality(),
        accepted,
        proposals,
    }
}
