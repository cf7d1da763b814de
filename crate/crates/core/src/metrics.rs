//! Per-frame counters and the cumulative normalized metrics built from them.
//!
//! A metric `X` is reported as `y_t = (1/N_t)·(1/F_t)·Σ_{n≤t} X_n`. Two
//! readings of `(N_t, F_t)` are supported:
//!
//! * [`Normalization::PerAttempt`]: `F_t` is the cumulative number of frames
//!   in which some device had data to send (device-frames), and `N_t = 1`
//!   since the device count is already folded into `F_t`.
//! * [`Normalization::WallClock`]: `F_t = t` and `N_t` is the number of
//!   devices with data at frame `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counters for a single frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameCounters {
    pub sensings: u32,
    /// Throughput of windows that completed without a primary-user overlap.
    pub throughput: f64,
    /// Failed frames: primary-user overlaps plus channel errors.
    pub collisions: u32,
    /// Frames lost to a primary-user overlap.
    pub pu_overlaps: u32,
    /// Devices with data to send this frame.
    pub active: u32,
    /// Device-frames offered this frame; increments `F_t`.
    pub attempted: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub channels: usize,
    pub sensings: Vec<u32>,
    pub throughput: Vec<f64>,
    pub collisions: Vec<u32>,
    pub pu_overlaps: Vec<u32>,
    pub active: Vec<u32>,
    pub attempted: Vec<u32>,
    /// Frame-major `frames × channels` exploration factors; empty for
    /// policies without one.
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sensing,
    Throughput,
    Collisions,
    PuOverlaps,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Sensing,
        Metric::Throughput,
        Metric::Collisions,
        Metric::PuOverlaps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sensing => "sensing",
            Metric::Throughput => "throughput",
            Metric::Collisions => "collisions",
            Metric::PuOverlaps => "pu_overlaps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerAttempt,
    WallClock,
}

impl Normalization {
    pub const ALL: [Normalization; 2] = [Normalization::PerAttempt, Normalization::WallClock];

    pub fn name(self) -> &'static str {
        match self {
            Normalization::PerAttempt => "per_attempt",
            Normalization::WallClock => "wall_clock",
        }
    }
}

impl MetricsTrace {
    pub fn new(channels: usize) -> Self {
        MetricsTrace {
            channels,
            ..Default::default()
        }
    }

    pub fn with_capacity(channels: usize, frames: usize, track_epsilon: bool) -> Self {
        MetricsTrace {
            channels,
            sensings: Vec::with_capacity(frames),
            throughput: Vec::with_capacity(frames),
            collisions: Vec::with_capacity(frames),
            pu_overlaps: Vec::with_capacity(frames),
            active: Vec::with_capacity(frames),
            attempted: Vec::with_capacity(frames),
            epsilon: Vec::with_capacity(if track_epsilon { frames * channels } else { 0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.sensings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensings.is_empty()
    }

    /// Append one frame. `epsilon` is either empty or one value per channel.
    pub fn push(&mut self, c: &FrameCounters, epsilon: &[f64]) {
        debug_assert!(epsilon.is_empty() || epsilon.len() == self.channels);
        self.sensings.push(c.sensings);
        self.throughput.push(c.throughput);
        self.collisions.push(c.collisions);
        self.pu_overlaps.push(c.pu_overlaps);
        self.active.push(c.active);
        self.attempted.push(c.attempted);
        self.epsilon.extend_from_slice(epsilon);
    }

    pub fn frame(&self, t: usize) -> FrameCounters {
        FrameCounters {
            sensings: self.sensings[t],
            throughput: self.throughput[t],
            collisions: self.collisions[t],
            pu_overlaps: self.pu_overlaps[t],
            active: self.active[t],
            attempted: self.attempted[t],
        }
    }

    pub fn has_epsilon(&self) -> bool {
        !self.epsilon.is_empty()
    }

    /// ε of `channel` over time.
    pub fn epsilon_series(&self, channel: usize) -> Vec<f64> {
        if self.epsilon.is_empty() {
            return Vec::new();
        }
        self.epsilon
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        match metric {
            Metric::Sensing => self.sensings.iter().map(|&x| x as f64).collect(),
            Metric::Throughput => self.throughput.clone(),
            Metric::Collisions => self.collisions.iter().map(|&x| x as f64).collect(),
            Metric::PuOverlaps => self.pu_overlaps.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn total(&self, metric: Metric) -> f64 {
        self.values(metric).iter().sum()
    }

    /// `F_t` under the per-attempt reading.
    pub fn attempted_frames(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.attempted
            .iter()
            .map(|&a| {
                acc += a as f64;
                acc
            })
            .collect()
    }
}

/// `y_t = (1/n_t)·(1/f_t)·Σ_{i≤t} x_i`; points where `n_t` or `f_t` is zero
/// are missing.
pub fn normalize(x: &[f64], n: &[f64], f: &[f64]) -> Vec<Option<f64>> {
    debug_assert!(x.len() == n.len() && x.len() == f.len());
    let mut acc = 0.0;
    x.iter()
        .zip(n)
        .zip(f)
        .map(|((&xi, &ni), &fi)| {
            acc += xi;
            (ni > 0.0 && fi > 0.0).then(|| acc / (ni * fi))
        })
        .collect()
}

pub fn normalized_series(
    trace: &MetricsTrace,
    metric: Metric,
    norm: Normalization,
) -> Vec<Option<f64>> {
    let x = trace.values(metric);
    match norm {
        Normalization::PerAttempt => {
            let n = vec![1.0; x.len()];
            normalize(&x, &n, &trace.attempted_frames())
        }
        Normalization::WallClock => {
            let n: Vec<f64> = trace.active.iter().map(|&a| a as f64).collect();
            let f: Vec<f64> = (1..=x.len()).map(|t| t as f64).collect();
            normalize(&x, &n, &f)
        }
    }
}

/// Pointwise statistics across replications.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<Option<f64>>,
    /// Sample standard deviation (zero when only one value is present).
    pub std: Vec<Option<f64>>,
    /// Replications contributing a value at each point.
    pub count: Vec<usize>,
}

/// Streaming pointwise mean and variance (Welford), fed one replication at
/// a time in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesAccumulator {
    count: Vec<usize>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    series: usize,
}

impl SeriesAccumulator {
    pub fn new(len: usize) -> Self {
        SeriesAccumulator {
            count: vec![0; len],
            mean: vec![0.0; len],
            m2: vec![0.0; len],
            series: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Replications folded in so far.
    pub fn series(&self) -> usize {
        self.series
    }

    pub fn add(&mut self, values: &[Option<f64>]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: values.len(),
            });
        }
        for (i, v) in values.iter().enumerate() {
            if let Some(x) = *v {
                self.push(i, x);
            }
        }
        self.series += 1;
        Ok(())
    }

    /// Like [`add`](Self::add) for a series without missing points.
    pub fn add_dense(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: values.len(),
            });
        }
        for (i, &x) in values.iter().enumerate() {
            self.push(i, x);
        }
        self.series += 1;
        Ok(())
    }

    fn push(&mut self, i: usize, x: f64) {
        self.count[i] += 1;
        let d = x - self.mean[i];
        self.mean[i] += d / self.count[i] as f64;
        self.m2[i] += d * (x - self.mean[i]);
    }

    pub fn finish(&self) -> Aggregate {
        let mut out = Aggregate {
            mean: Vec::with_capacity(self.len()),
            std: Vec::with_capacity(self.len()),
            count: self.count.clone(),
        };
        for i in 0..self.len() {
            let n = self.count[i];
            if n == 0 {
                out.mean.push(None);
                out.std.push(None);
            } else {
                out.mean.push(Some(self.mean[i]));
                let var = if n > 1 { self.m2[i] / (n - 1) as f64 } else { 0.0 };
                out.std.push(Some(var.max(0.0).sqrt()));
            }
        }
        out
    }
}

/// Pointwise mean and sample standard deviation, skipping missing points.
pub fn aggregate_replications(series: &[Vec<Option<f64>>]) -> Result<Aggregate> {
    let Some(first) = series.first() else {
        return Ok(Aggregate::default());
    };
    let mut acc = SeriesAccumulator::new(first.len());
    for s in series {
        acc.add(s)?;
    }
    Ok(acc.finish())
}

/// Last non-missing value of a series.
pub fn final_value(series: &[Option<f64>]) -> Option<f64> {
    series.iter().rev().find_map(|v| *v)
}
