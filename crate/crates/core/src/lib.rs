//! Simulator of learned opportunistic spectrum access for IoT cognitive-radio
//! networks.
//!
//! A central node assigns licensed channels to waiting devices by hill
//! climbing over a learned value table, predicts how many frames a channel
//! found free will stay free with a Dirichlet-categorical model, and tunes the
//! exploration of long skips per channel with SPSA so the collision rate
//! tracks a tolerated threshold.
//!
//! * [`traffic`]: primary- and secondary-user traffic.
//! * [`assign`]: value table and hill-climbing channel assignment.
//! * [`residual`]: residual idle-time predictors.
//! * [`explore`]: exploration schedules and the SPSA controller.
//! * [`simcore`]: the frame-synchronous engine and baseline policies.
//! * [`metrics`]: normalized cumulative metrics and replication statistics.
//! * [`config`] and [`runner`]: experiment description and Monte-Carlo runner.

pub mod assign;
pub mod config;
pub mod error;
pub mod explore;
pub mod metrics;
pub mod residual;
pub mod runner;
pub mod seed;
pub mod simcore;
pub mod traffic;

pub use config::{ExperimentConfig, PuSpec};
pub use error::{Error, Result};
pub use simcore::{Policy, Simulation};
