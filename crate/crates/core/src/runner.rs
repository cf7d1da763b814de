//! Monte-Carlo experiment runner.
//!
//! Replications run in parallel but are folded into the pointwise
//! statistics in replication order, so outputs do not depend on scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    final_value, normalized_series, Aggregate, Metric, MetricsTrace, Normalization,
    SeriesAccumulator,
};
use crate::seed::StreamSeeds;
use crate::simcore::{Policy, Simulation, Totals};

/// Everything one replication produced.
#[derive(Debug, Clone)]
pub struct Replication {
    pub policy: Policy,
    pub replication: u64,
    pub trace: MetricsTrace,
    pub totals: Totals,
    /// First PU transition instants per channel.
    pub transitions: Vec<Vec<f64>>,
}

pub fn run_replication(cfg: &ExperimentConfig, policy: Policy, replication: u64) -> Result<Replication> {
    let scenario = cfg.scenario(replication);
    let mut sim = Simulation::new(
        &scenario,
        &cfg.engine(),
        policy,
        StreamSeeds::new(cfg.seed, replication),
    )?;
    let trace = sim.run(cfg.horizon)?;
    Ok(Replication {
        policy,
        replication,
        trace,
        totals: *sim.totals(),
        transitions: (0..cfg.channels).map(|c| sim.transitions(c).to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// End-of-horizon averages for one policy under one normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: Policy,
    pub normalization: Normalization,
    pub replications: usize,
    pub sensing: Stat,
    pub throughput: Stat,
    pub collisions: Stat,
    pub pu_overlaps: Stat,
}

impl SummaryRow {
    pub fn get(&self, metric: Metric) -> Stat {
        match metric {
            Metric::Sensing => self.sensing,
            Metric::Throughput => self.throughput,
            Metric::Collisions => self.collisions,
            Metric::PuOverlaps => self.pu_overlaps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyResult {
    pub policy: Policy,
    /// Pointwise statistics per (metric, normalization).
    pub series: Vec<(Metric, Normalization, Aggregate)>,
    /// Pointwise ε statistics per channel; empty without exploration.
    pub epsilon: Vec<Aggregate>,
    pub summary: Vec<SummaryRow>,
    pub totals: Vec<Totals>,
}

impl PolicyResult {
    pub fn series(&self, metric: Metric, norm: Normalization) -> &Aggregate {
        &self
            .series
            .iter()
            .find(|(m, n, _)| *m == metric && *n == norm)
            .expect("every metric and normalization is aggregated")
            .2
    }

    pub fn summary(&self, norm: Normalization) -> &SummaryRow {
        self.summary
            .iter()
            .find(|r| r.normalization == norm)
            .expect("every normalization is summarized")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub results: Vec<PolicyResult>,
}

impl ExperimentReport {
    pub fn result(&self, policy: Policy) -> Option<&PolicyResult> {
        self.results.iter().find(|r| r.policy == policy)
    }
}

fn keys() -> impl Iterator<Item = (Metric, Normalization)> {
    Metric::ALL
        .into_iter()
        .flat_map(|m| Normalization::ALL.into_iter().map(move |n| (m, n)))
}

struct Reduced {
    series: Vec<Vec<Option<f64>>>,
    epsilon: Vec<Vec<f64>>,
    totals: Totals,
}

fn reduce(rep: Replication, channels: usize) -> Reduced {
    let series = keys()
        .map(|(m, n)| normalized_series(&rep.trace, m, n))
        .collect();
    let epsilon = if rep.trace.has_epsilon() {
        (0..channels).map(|c| rep.trace.epsilon_series(c)).collect()
    } else {
        Vec::new()
    };
    Reduced {
        series,
        epsilon,
        totals: rep.totals,
    }
}

pub fn run_policy(cfg: &ExperimentConfig, policy: Policy) -> Result<PolicyResult> {
    cfg.validate()?;
    let len = cfg.horizon as usize;
    let nkeys = keys().count();
    let mut series: Vec<SeriesAccumulator> = (0..nkeys).map(|_| SeriesAccumulator::new(len)).collect();
    let mut finals: Vec<SeriesAccumulator> = (0..nkeys).map(|_| SeriesAccumulator::new(1)).collect();
    let mut epsilon: Vec<SeriesAccumulator> = Vec::new();
    let mut totals = Vec::with_capacity(cfg.replications as usize);

    let chunk = (rayon::current_num_threads() * 2).max(1) as u64;
    let mut start = 0;
    while start < cfg.replications {
        let end = (start + chunk).min(cfg.replications);
        let reduced: Vec<Reduced> = (start..end)
            .into_par_iter()
            .map(|r| run_replication(cfg, policy, r).map(|rep| reduce(rep, cfg.channels)))
            .collect::<Result<_>>()?;
        for red in reduced {
            for (k, s) in red.series.iter().enumerate() {
                series[k].add(s)?;
                finals[k].add(&[final_value(s)])?;
            }
            if !red.epsilon.is_empty() && epsilon.is_empty() {
                epsilon = (0..cfg.channels).map(|_| SeriesAccumulator::new(len)).collect();
            }
            for (c, e) in red.epsilon.iter().enumerate() {
                epsilon[c].add_dense(e)?;
            }
            totals.push(red.totals);
        }
        start = end;
    }

    let series: Vec<(Metric, Normalization, Aggregate)> = keys()
        .zip(&series)
        .map(|((m, n), acc)| (m, n, acc.finish()))
        .collect();
    let finals: Vec<Aggregate> = finals.iter().map(SeriesAccumulator::finish).collect();
    let summary = Normalization::ALL
        .into_iter()
        .map(|norm| {
            let stat = |metric: Metric| {
                let k = keys().position(|key| key == (metric, norm)).expect("known key");
                Stat {
                    mean: finals[k].mean[0].unwrap_or(f64::NAN),
                    std: finals[k].std[0].unwrap_or(f64::NAN),
                }
            };
            SummaryRow {
                policy,
                normalization: norm,
                replications: cfg.replications as usize,
                sensing: stat(Metric::Sensing),
                throughput: stat(Metric::Throughput),
                collisions: stat(Metric::Collisions),
                pu_overlaps: stat(Metric::PuOverlaps),
            }
        })
        .collect();
    Ok(PolicyResult {
        policy,
        series,
        epsilon: epsilon.iter().map(SeriesAccumulator::finish).collect(),
        summary,
        totals,
    })
}

/// Run every configured policy in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results = cfg
        .policies
        .iter()
        .map(|&p| run_policy(cfg, p))
        .collect::<Result<_>>()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        results,
    })
}

/// Run and write `trace_<policy>.csv`, `epsilon_<policy>.csv`,
/// `summary.csv` and `config_resolved.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let report = run(cfg)?;
    write_outputs(&report, out)?;
    Ok(report)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    io_err(path, std::io::Error::other(e))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sampled_frames(len: usize, stride: u64) -> impl Iterator<Item = usize> {
    let stride = stride as usize;
    (0..len).filter(move |&i| (i + 1) % stride == 0 || i + 1 == len)
}

pub fn write_outputs(report: &ExperimentReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let cfg = &report.config;
    for res in &report.results {
        write_trace(res, cfg, &out.join(format!("trace_{}.csv", res.policy)))?;
        if !res.epsilon.is_empty() {
            write_epsilon(res, cfg, &out.join(format!("epsilon_{}.csv", res.policy)))?;
        }
    }
    write_summary(report, &out.join("summary.csv"))?;
    write_resolved(cfg, &out.join("config_resolved.json"))
}

fn write_trace(res: &PolicyResult, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["frame", "policy", "metric", "normalization", "mean", "std", "count"])
        .map_err(|e| csv_err(path, e))?;
    let len = cfg.horizon as usize;
    for i in sampled_frames(len, cfg.trace_stride) {
        for (metric, norm, agg) in &res.series {
            w.write_record([
                (i + 1).to_string(),
                res.policy.to_string(),
                metric.name().to_string(),
                norm.name().to_string(),
                cell(agg.mean[i]),
                cell(agg.std[i]),
                agg.count[i].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_epsilon(res: &PolicyResult, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["frame".to_string()];
    for c in 0..res.epsilon.len() {
        header.push(format!("ch{c}_mean"));
        header.push(format!("ch{c}_std"));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in sampled_frames(cfg.horizon as usize, cfg.trace_stride) {
        let mut row = vec![(i + 1).to_string()];
        for agg in &res.epsilon {
            row.push(cell(agg.mean[i]));
            row.push(cell(agg.std[i]));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_summary(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "policy",
        "normalization",
        "replications",
        "avg_sensing",
        "avg_sensing_std",
        "avg_throughput",
        "avg_throughput_std",
        "avg_frame_collisions",
        "avg_frame_collisions_std",
        "avg_pu_overlaps",
        "avg_pu_overlaps_std",
    ])
    .map_err(|e| csv_err(path, e))?;
    for res in &report.results {
        for row in &res.summary {
            let mut rec = vec![
                row.policy.to_string(),
                row.normalization.name().to_string(),
                row.replications.to_string(),
            ];
            for m in Metric::ALL {
                let s = row.get(m);
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_resolved(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let capacity = cfg.capacity_matrix();
    let rows: Vec<Vec<f64>> = (0..cfg.devices)
        .map(|d| (0..cfg.channels).map(|c| capacity.get(d, c)).collect())
        .collect();
    let channel_models: Vec<_> = (0..cfg.replications).map(|r| cfg.channel_models(r)).collect();
    let doc = serde_json::json!({
        "config": cfg,
        "capacity": rows,
        "channel_models": channel_models,
    });
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}
