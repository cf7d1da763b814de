//! Experiment configuration: one JSON document whose defaults reproduce the
//! reference setting (5 channels, 20 event-driven devices, exponential
//! primary traffic).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assign::AssignConfig;
use crate::error::{invalid, Error, Result};
use crate::explore::ExplorationConfig;
use crate::residual::{ParametricConfig, ResidualConfig};
use crate::seed::{tag, StreamSeeds};
use crate::simcore::{Capacity, EngineConfig, Policy, RadioConfig, Scenario};
use crate::traffic::{CollisionMode, GpdParams, PuTrafficModel, SuTrafficParams};

/// How the primary-user model of each channel is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PuSpec {
    /// GPD ON and OFF periods with shape and location drawn uniformly per
    /// channel and replication, independently for ON and OFF.
    RandomGpd {
        scale: f64,
        shape: [f64; 2],
        location: [f64; 2],
    },
    /// Exponential ON and OFF periods with means drawn uniformly per channel
    /// and replication.
    RandomExponential {
        mean_on: [f64; 2],
        mean_off: [f64; 2],
    },
    /// Explicit models: one shared by every channel, or one per channel.
    Fixed { models: Vec<PuTrafficModel> },
}

impl PuSpec {
    pub fn gpd() -> Self {
        PuSpec::RandomGpd {
            scale: 500.0,
            shape: [0.0, 0.5],
            location: [50.0, 100.0],
        }
    }

    pub fn exponential() -> Self {
        PuSpec::RandomExponential {
            mean_on: [1.0, 200.0],
            mean_off: [1.0, 200.0],
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        fn range(field: &str, r: [f64; 2], min: f64) -> Result<()> {
            if !(r[0] >= min && r[0] <= r[1] && r[1].is_finite()) {
                return Err(invalid(field, format!("need {min} <= min <= max < inf")));
            }
            Ok(())
        }
        match self {
            PuSpec::RandomGpd {
                scale,
                shape,
                location,
            } => {
                if !(*scale > 0.0) {
                    return Err(invalid("pu.scale", "must be > 0"));
                }
                range("pu.shape", *shape, 0.0)?;
                if shape[1] >= 1.0 {
                    return Err(invalid("pu.shape", "must stay below 1 for a finite mean"));
                }
                range("pu.location", *location, 0.0)
            }
            PuSpec::RandomExponential { mean_on, mean_off } => {
                range("pu.mean_on", *mean_on, f64::MIN_POSITIVE)?;
                range("pu.mean_off", *mean_off, f64::MIN_POSITIVE)
            }
            PuSpec::Fixed { models } => {
                if models.len() != 1 && models.len() != channels {
                    return Err(invalid(
                        "pu.models",
                        format!("need 1 or {channels} models, got {}", models.len()),
                    ));
                }
                models.iter().try_for_each(PuTrafficModel::validate)
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, channel: usize, rng: &mut R) -> PuTrafficModel {
        fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        }
        match self {
            PuSpec::RandomGpd {
                scale,
                shape,
                location,
            } => {
                let mut side = || GpdParams {
                    shape: uniform(*shape, rng),
                    scale: *scale,
                    location: uniform(*location, rng),
                };
                let on = side();
                let off = side();
                PuTrafficModel::Gpd { on, off }
            }
            PuSpec::RandomExponential { mean_on, mean_off } => PuTrafficModel::Exponential {
                mean_on: uniform(*mean_on, rng),
                mean_off: uniform(*mean_off, rng),
            },
            PuSpec::Fixed { models } => models[channel % models.len()].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channels: usize,
    pub devices: usize,
    pub pu: PuSpec,
    /// Traffic class shared by every device.
    pub su: SuTrafficParams,
    /// Range of the Uniform capacity draw per device-channel pair.
    pub capacity: [f64; 2],
    pub radio: RadioConfig,
    pub assign: AssignConfig,
    pub residual: ResidualConfig,
    pub parametric: ParametricConfig,
    pub exploration: ExplorationConfig,
    pub collision_mode: CollisionMode,
    /// Frames per replication.
    pub horizon: u64,
    pub replications: u64,
    pub seed: u64,
    pub policies: Vec<Policy>,
    /// Write every `trace_stride`-th frame (and the last) to trace files.
    pub trace_stride: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            channels: 5,
            devices: 20,
            pu: PuSpec::exponential(),
            su: SuTrafficParams::EventDriven {
                alarm_prob: 0.05,
                mean_on: 10.0,
            },
            capacity: [1.0, 5.0],
            radio: RadioConfig::default(),
            assign: AssignConfig::default(),
            residual: ResidualConfig::default(),
            parametric: ParametricConfig::default(),
            exploration: ExplorationConfig::default(),
            collision_mode: CollisionMode::default(),
            horizon: 20_000,
            replications: 50,
            seed: 1,
            policies: Policy::ALL.to_vec(),
            trace_stride: 1,
        }
    }
}

impl ExperimentConfig {
    /// Periodic devices sending 5 frames every 100.
    pub fn periodic_su() -> SuTrafficParams {
        SuTrafficParams::Periodic {
            on: 5,
            interval: 100,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(invalid("channels", "must be >= 1"));
        }
        if self.devices == 0 {
            return Err(invalid("devices", "must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be >= 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be >= 1"));
        }
        if self.trace_stride == 0 {
            return Err(invalid("trace_stride", "must be >= 1"));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "list at least one policy"));
        }
        if !(self.capacity[0] > 0.0 && self.capacity[0] <= self.capacity[1]) {
            return Err(invalid("capacity", "need 0 < min <= max"));
        }
        self.pu.validate(self.channels)?;
        self.su.validate()?;
        self.engine().validate()
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            radio: self.radio,
            assign: self.assign,
            residual: self.residual,
            parametric: self.parametric,
            exploration: self.exploration,
            collision_mode: self.collision_mode,
        }
    }

    /// Capacity matrix, fixed for the whole experiment.
    pub fn capacity_matrix(&self) -> Capacity {
        let mut rng = StreamSeeds::new(self.seed, 0).rng(tag::CAPACITY, 0);
        Capacity::uniform(
            self.devices,
            self.channels,
            self.capacity[0],
            self.capacity[1],
            &mut rng,
        )
    }

    /// Channel models for `replication`; identical for every policy.
    pub fn channel_models(&self, replication: u64) -> Vec<PuTrafficModel> {
        let mut rng = StreamSeeds::new(self.seed, replication).rng(tag::SCENARIO, 0);
        (0..self.channels).map(|c| self.pu.draw(c, &mut rng)).collect()
    }

    pub fn scenario(&self, replication: u64) -> Scenario {
        Scenario {
            channels: self.channel_models(replication),
            devices: vec![self.su; self.devices],
            capacity: self.capacity_matrix(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"channels": 2, "radio": {"p_detect": 0.9}, "policies": ["genie"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.channels, 2);
        assert_eq!(cfg.radio.p_detect, 0.9);
        assert_eq!(cfg.radio.p_false_alarm, 0.05);
        assert_eq!(cfg.policies, vec![Policy::Genie]);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"radio": {"p_detect": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("radio.p_detect"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"replications": 0}"#).unwrap_err();
        assert!(err.to_string().contains("replications"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"chanels": 3}"#).unwrap_err();
        assert!(err.to_string().contains("chanels"), "{err}");
    }

    #[test]
    fn scenarios_are_drawn_within_ranges() {
        let cfg = ExperimentConfig {
            pu: PuSpec::gpd(),
            ..Default::default()
        };
        for rep in 0..20 {
            for m in cfg.channel_models(rep) {
                let PuTrafficModel::Gpd { on, off } = m else { panic!() };
                for p in [on, off] {
                    assert_eq!(p.scale, 500.0);
                    assert!((0.0..0.5).contains(&p.shape));
                    assert!((50.0..100.0).contains(&p.location));
                }
            }
        }
        assert_eq!(cfg.channel_models(3), cfg.channel_models(3));
        assert_ne!(cfg.channel_models(3), cfg.channel_models(4));
        assert_eq!(cfg.capacity_matrix(), cfg.capacity_matrix());
    }
}
