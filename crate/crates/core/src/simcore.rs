//! Frame-synchronous engine: device life cycles, the central node's loop,
//! sensing and transmission physics, and the baseline policies.
//!
//! Frame `t` covers continuous time `[t-1, t)` in frame units. When a device
//! senses, sensing occupies `[0, s)` of the frame with `s = τ_s / T_f` and the
//! transmission that follows covers `[s, 1)`. Frames sent inside a granted
//! skip window are not sensed and cover the whole frame.
//!
//! A device's payload is the length of its ON period in frames: every frame
//! it spends waiting or transmitting consumes one frame of it, and a device
//! whose payload runs out goes idle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{hill_climb, AssignConfig, ValueTable};
use crate::error::{invalid, Error, Result};
use crate::explore::{ExplorationConfig, ExplorationController, ScheduleKind};
use crate::metrics::{FrameCounters, MetricsTrace};
use crate::residual::{ParametricConfig, ParametricResidualModel, ResidualConfig, ResidualModel};
use crate::seed::{tag, StreamSeeds};
use crate::traffic::{su_generate, CollisionMode, PuProcess, PuTrafficModel, SuTrafficParams};

/// Number of PU transition instants logged per channel.
pub const TRANSITION_LOG: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioConfig {
    /// P_d: probability an active primary user is detected.
    pub p_detect: f64,
    /// P_f: probability an idle channel is reported busy.
    pub p_false_alarm: f64,
    /// T_f in milliseconds.
    pub frame_ms: f64,
    /// τ_s in milliseconds.
    pub sensing_ms: f64,
    /// Probability a frame is lost to channel error.
    pub channel_error: f64,
    /// Primary-user SNR at the device in dB. Informational only.
    pub snr_db: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            p_detect: 0.95,
            p_false_alarm: 0.05,
            frame_ms: 10.0,
            sensing_ms: 2.0,
            channel_error: 0.05,
            snr_db: -10.0,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("radio.p_detect", self.p_detect),
            ("radio.p_false_alarm", self.p_false_alarm),
            ("radio.channel_error", self.channel_error),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        if !(self.frame_ms > 0.0) {
            return Err(invalid("radio.frame_ms", "must be > 0"));
        }
        if !(0.0..self.frame_ms).contains(&self.sensing_ms) {
            return Err(invalid("radio.sensing_ms", "must lie in [0, frame_ms)"));
        }
        Ok(())
    }

    /// Fraction of a frame consumed by sensing.
    pub fn sensing_offset(&self) -> f64 {
        self.sensing_ms / self.frame_ms
    }
}

/// Per device-channel throughput per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Capacity {
    devices: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Capacity {
    pub fn constant(devices: usize, channels: usize, value: f64) -> Self {
        assert!(value > 0.0);
        Capacity {
            devices,
            channels,
            values: vec![value; devices * channels],
        }
    }

    /// Independent Uniform(`lo`, `hi`) entries.
    pub fn uniform<R: Rng + ?Sized>(
        devices: usize,
        channels: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        assert!(0.0 < lo && lo <= hi);
        let values = (0..devices * channels)
            .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
            .collect();
        Capacity {
            devices,
            channels,
            values,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let devices = rows.len();
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(invalid("capacity", "rows must have equal length"));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("capacity", "entries must be > 0"));
        }
        Ok(Capacity {
            devices,
            channels,
            values,
        })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, device: usize, channel: usize) -> f64 {
        self.values[device * self.channels + channel]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    ProposedFixed,
    ProposedDecay,
    ProposedSpsa,
    Traditional,
    Genie,
    Parametric,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::ProposedFixed,
        Policy::ProposedDecay,
        Policy::ProposedSpsa,
        Policy::Traditional,
        Policy::Genie,
        Policy::Parametric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::ProposedFixed => "proposed-fixed",
            Policy::ProposedDecay => "proposed-decay",
            Policy::ProposedSpsa => "proposed-spsa",
            Policy::Traditional => "traditional",
            Policy::Genie => "genie",
            Policy::Parametric => "parametric",
        }
    }

    /// Exploration schedule, for policies driven by the Dirichlet predictor.
    pub fn schedule(self) -> Option<ScheduleKind> {
        match self {
            Policy::ProposedFixed => Some(ScheduleKind::Constant),
            Policy::ProposedDecay => Some(ScheduleKind::Decay),
            Policy::ProposedSpsa => Some(ScheduleKind::Spsa),
            _ => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid("policies", format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Idle,
    Wait,
    /// Assigned a channel to sense this frame.
    Sense { channel: usize },
    /// Transmitting without re-sensing for `skip_left` more frames.
    Active { channel: usize, skip_left: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Window {
    frames: u32,
    /// Delivered frames, the sensed first frame counting fractionally.
    delivered: f64,
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub lifecycle: Lifecycle,
    pub traffic: SuTrafficParams,
    /// Frames of the current ON period still to go.
    pub payload: u32,
    phase: u32,
    wait_since: u64,
    last_tx: u64,
    window: Window,
}

impl DeviceState {
    pub fn is_on(&self) -> bool {
        self.lifecycle != Lifecycle::Idle
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameEvent {
    SensedFree {
        device: usize,
        channel: usize,
    },
    SensedBusy {
        device: usize,
        channel: usize,
    },
    SkipGranted {
        device: usize,
        channel: usize,
        t_skip: u32,
        /// Granted from a predecessor's unused window, without sensing.
        handoff: bool,
    },
    TxSuccess {
        device: usize,
        channel: usize,
        frames: u32,
        /// Delivered frames; the sensed first frame counts fractionally.
        delivered: f64,
        throughput: f64,
    },
    TxCollision {
        device: usize,
        channel: usize,
        frames_before: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseResult {
    Free,
    Busy,
}

/// Energy-detector abstraction: one draw from `rng` per call.
pub fn sense<R: Rng + ?Sized>(pu: &PuProcess, radio: &RadioConfig, rng: &mut R) -> SenseResult {
    let u: f64 = rng.random();
    let p_busy = if pu.is_active() {
        radio.p_detect
    } else {
        radio.p_false_alarm
    };
    if u < p_busy {
        SenseResult::Busy
    } else {
        SenseResult::Free
    }
}

/// Advance `pu` across a transmission segment ending at process time `end`.
/// Returns whether the primary user was on at any point in it; on the first
/// overlap the primary user is notified with a draw from `retx`. `log`
/// receives the time of every transition.
fn segment<R1, R2, F>(
    pu: &mut PuProcess,
    end: f64,
    traffic: &mut R1,
    retx: &mut R2,
    mut log: F,
) -> Result<bool>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
    F: FnMut(f64),
{
    if pu.is_active() {
        pu.notify_collision(retx)?;
        pu.advance_to_with(end, traffic, |tr| log(tr.time));
        return Ok(true);
    }
    let on_at = pu.next_transition();
    if on_at >= end {
        pu.advance_to_with(end, traffic, |tr| log(tr.time));
        return Ok(false);
    }
    pu.advance_to_with(on_at, traffic, |tr| log(tr.time));
    debug_assert!(pu.is_active());
    pu.notify_collision(retx)?;
    pu.advance_to_with(end, traffic, |tr| log(tr.time));
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    Delivered,
    ChannelError,
    PuOverlap,
}

/// One transmitted frame segment of length `len`. The channel-error draw is
/// always taken so `radio_rng` stays aligned.
pub fn transmit_frame<R1, R2, R3>(
    pu: &mut PuProcess,
    len: f64,
    channel_error: f64,
    traffic: &mut R1,
    retx: &mut R2,
    radio_rng: &mut R3,
) -> Result<FrameOutcome>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
    R3: Rng + ?Sized,
{
    let end = pu.clock() + len;
    let overlap = segment(pu, end, traffic, retx, |_| {})?;
    let lost = radio_rng.random::<f64>() < channel_error;
    Ok(if overlap {
        FrameOutcome::PuOverlap
    } else if lost {
        FrameOutcome::ChannelError
    } else {
        FrameOutcome::Delivered
    })
}

/// Per-window tallies returned by [`transmit_window`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindowReport {
    pub frames: u32,
    pub channel_errors: u32,
    pub pu_overlaps: u32,
}

/// Transmit one granted window in isolation: up to `min(t_skip, payload)`
/// frames, stopping at the first frame that overlaps the primary user. If
/// `sensed` the first frame starts after the sensing interval, and `pu` must
/// already be positioned there. `pu` ends at the end of the last frame sent.
#[allow(clippy::too_many_arguments)]
pub fn transmit_window<R1, R2, R3>(
    device: usize,
    channel: usize,
    t_skip: u32,
    payload: u32,
    capacity: f64,
    sensed: bool,
    pu: &mut PuProcess,
    radio: &RadioConfig,
    traffic: &mut R1,
    retx: &mut R2,
    radio_rng: &mut R3,
) -> Result<(FrameEvent, WindowReport)>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
    R3: Rng + ?Sized,
{
    if t_skip == 0 {
        return Err(invalid("t_skip", "must be >= 1"));
    }
    let mut report = WindowReport::default();
    let mut delivered = 0.0;
    let n = t_skip.min(payload);
    for i in 0..n {
        let len = if sensed && i == 0 {
            1.0 - radio.sensing_offset()
        } else {
            1.0
        };
        report.frames += 1;
        match transmit_frame(pu, len, radio.channel_error, traffic, retx, radio_rng)? {
            FrameOutcome::PuOverlap => {
                report.pu_overlaps += 1;
                let event = FrameEvent::TxCollision {
                    device,
                    channel,
                    frames_before: i,
                };
                return Ok((event, report));
            }
            FrameOutcome::ChannelError => report.channel_errors += 1,
            FrameOutcome::Delivered => delivered += len,
        }
    }
    let event = FrameEvent::TxSuccess {
        device,
        channel,
        frames: report.frames,
        delivered,
        throughput: delivered * capacity,
    };
    Ok((event, report))
}

/// Everything that varies between replications of one experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub channels: Vec<PuTrafficModel>,
    pub devices: Vec<SuTrafficParams>,
    pub capacity: Capacity,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(invalid("channels", "need at least one channel"));
        }
        if self.devices.is_empty() {
            return Err(invalid("devices", "need at least one device"));
        }
        if self.capacity.devices() != self.devices.len()
            || self.capacity.channels() != self.channels.len()
        {
            return Err(invalid("capacity", "shape must be devices × channels"));
        }
        for m in &self.channels {
            m.validate()?;
        }
        for d in &self.devices {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub radio: RadioConfig,
    pub assign: AssignConfig,
    pub residual: ResidualConfig,
    pub parametric: ParametricConfig,
    pub exploration: ExplorationConfig,
    pub collision_mode: CollisionMode,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        self.assign.validate()?;
        self.residual.validate()?;
        self.exploration.validate()
    }
}

/// Cumulative counters used by the conservation checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Totals {
    pub sensings: u64,
    pub grants: u64,
    pub handoffs: u64,
    pub declines: u64,
    pub successes: u64,
    pub tx_collisions: u64,
    pub pu_overlap_frames: u64,
    pub channel_error_frames: u64,
    pub throughput: f64,
}

#[derive(Debug, Clone)]
struct Channel {
    pu: PuProcess,
    occupant: Option<usize>,
    /// Unused frames of a predecessor's window, assignable without sensing.
    residue: u32,
    traffic: ChaCha8Rng,
    retx: ChaCha8Rng,
    notifications: u64,
    transitions: Vec<f64>,
}

impl Channel {
    /// Advance to absolute time `until`; frame `t` spans `[t-1, t)`.
    fn advance_to(&mut self, until: f64) {
        let log = &mut self.transitions;
        self.pu.advance_to_with(until, &mut self.traffic, |tr| {
            if log.len() < TRANSITION_LOG {
                log.push(tr.time);
            }
        });
    }

    fn transmit(&mut self, end: f64, channel_error: f64, radio_rng: &mut ChaCha8Rng) -> Result<FrameOutcome> {
        let log = &mut self.transitions;
        let overlap = segment(&mut self.pu, end, &mut self.traffic, &mut self.retx, |at| {
            if log.len() < TRANSITION_LOG {
                log.push(at);
            }
        })?;
        if overlap {
            self.notifications += 1;
        }
        let lost = radio_rng.random::<f64>() < channel_error;
        Ok(if overlap {
            FrameOutcome::PuOverlap
        } else if lost {
            FrameOutcome::ChannelError
        } else {
            FrameOutcome::Delivered
        })
    }
}

enum Predictor {
    None,
    Dirichlet(ResidualModel, ExplorationController),
    Parametric(ParametricResidualModel),
}

/// One replication of one policy.
pub struct Simulation {
    policy: Policy,
    cfg: EngineConfig,
    capacity: Capacity,
    frame: u64,
    devices: Vec<DeviceState>,
    channels: Vec<Channel>,
    su_rngs: Vec<ChaCha8Rng>,
    radio_rngs: Vec<ChaCha8Rng>,
    assign_rng: ChaCha8Rng,
    residual_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    values: ValueTable,
    predictor: Predictor,
    totals: Totals,
    events: Option<Vec<(u64, FrameEvent)>>,
    // Scratch buffers reused across frames.
    waiting: Vec<usize>,
    pool: Vec<usize>,
    to_sense: Vec<Option<usize>>,
    epsilon: Vec<f64>,
}

impl Simulation {
    pub fn new(
        scenario: &Scenario,
        cfg: &EngineConfig,
        policy: Policy,
        seeds: StreamSeeds,
    ) -> Result<Self> {
        scenario.validate()?;
        cfg.validate()?;
        let n = scenario.channels.len();
        let m = scenario.devices.len();
        let channels = scenario
            .channels
            .iter()
            .enumerate()
            .map(|(c, model)| {
                let mut traffic = seeds.rng(tag::PU_TRAFFIC, c as u64);
                let pu = PuProcess::new(model.clone(), cfg.collision_mode, &mut traffic);
                Channel {
                    pu,
                    occupant: None,
                    residue: 0,
                    traffic,
                    retx: seeds.rng(tag::PU_RETRANSMIT, c as u64),
                    notifications: 0,
                    transitions: Vec::new(),
                }
            })
            .collect();
        let mut su_rngs: Vec<ChaCha8Rng> =
            (0..m).map(|d| seeds.rng(tag::SU_TRAFFIC, d as u64)).collect();
        let devices = scenario
            .devices
            .iter()
            .enumerate()
            .map(|(d, &traffic)| {
                let phase = match traffic {
                    SuTrafficParams::Periodic { interval, .. } => {
                        su_rngs[d].random_range(0..interval)
                    }
                    SuTrafficParams::EventDriven { .. } => 0,
                };
                DeviceState {
                    id: d,
                    lifecycle: Lifecycle::Idle,
                    traffic,
                    payload: 0,
                    phase,
                    wait_since: 0,
                    last_tx: 0,
                    window: Window::default(),
                }
            })
            .collect();
        let mut explore_rng = seeds.rng(tag::EXPLORE, 0);
        let predictor = match policy {
            Policy::ProposedFixed | Policy::ProposedDecay | Policy::ProposedSpsa => {
                let kind = policy.schedule().expect("proposed policies have a schedule");
                Predictor::Dirichlet(
                    ResidualModel::new(n, cfg.residual)?,
                    ExplorationController::new(n, kind, &cfg.exploration, &mut explore_rng),
                )
            }
            Policy::Parametric => Predictor::Parametric(ParametricResidualModel::new(
                n,
                cfg.parametric,
                cfg.residual.support,
            )?),
            Policy::Traditional | Policy::Genie => Predictor::None,
        };
        Ok(Simulation {
            policy,
            cfg: *cfg,
            capacity: scenario.capacity.clone(),
            frame: 0,
            devices,
            channels,
            su_rngs,
            radio_rngs: (0..m).map(|d| seeds.rng(tag::RADIO, d as u64)).collect(),
            assign_rng: seeds.rng(tag::ASSIGN, 0),
            residual_rng: seeds.rng(tag::RESIDUAL, 0),
            explore_rng,
            values: ValueTable::new(n, m, cfg.assign.learning_rate)?,
            predictor,
            totals: Totals::default(),
            events: None,
            waiting: Vec::with_capacity(m),
            pool: Vec::with_capacity(n),
            to_sense: vec![None; n],
            epsilon: Vec::with_capacity(n),
        })
    }

    /// Keep a log of every [`FrameEvent`] from now on.
    pub fn record_events(&mut self, on: bool) {
        self.events = on.then(Vec::new);
    }

    pub fn events(&self) -> &[(u64, FrameEvent)] {
        self.events.as_deref().unwrap_or(&[])
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    /// Frames simulated so far.
    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn totals(&self) -> &Totals {
        &self.totals
    }

    pub fn values(&self) -> &ValueTable {
        &self.values
    }

    pub fn pu(&self, channel: usize) -> &PuProcess {
        &self.channels[channel].pu
    }

    pub fn occupant(&self, channel: usize) -> Option<usize> {
        self.channels[channel].occupant
    }

    pub fn residue(&self, channel: usize) -> u32 {
        self.channels[channel].residue
    }

    /// Collision notifications received by the primary user of `channel`.
    pub fn notifications(&self, channel: usize) -> u64 {
        self.channels[channel].notifications
    }

    /// The first [`TRANSITION_LOG`] transition instants on `channel`.
    pub fn transitions(&self, channel: usize) -> &[f64] {
        &self.channels[channel].transitions
    }

    pub fn residual_model(&self) -> Option<&ResidualModel> {
        match &self.predictor {
            Predictor::Dirichlet(m, _) => Some(m),
            _ => None,
        }
    }

    pub fn exploration(&self) -> Option<&ExplorationController> {
        match &self.predictor {
            Predictor::Dirichlet(_, e) => Some(e),
            _ => None,
        }
    }

    pub fn has_epsilon(&self) -> bool {
        matches!(self.predictor, Predictor::Dirichlet(..))
    }

    fn log(&mut self, event: FrameEvent) {
        if let Some(ev) = &mut self.events {
            ev.push((self.frame, event));
        }
    }

    /// Simulate `frames` more frames and return their counters.
    pub fn run(&mut self, frames: u64) -> Result<MetricsTrace> {
        let n = self.channels.len();
        let mut trace = MetricsTrace::with_capacity(n, frames as usize, self.has_epsilon());
        for _ in 0..frames {
            let fc = self.step()?;
            self.epsilon.clear();
            if let Predictor::Dirichlet(_, ex) = &self.predictor {
                self.epsilon.extend((0..n).map(|c| ex.nominal(c, self.frame)));
            }
            trace.push(&fc, &self.epsilon);
        }
        Ok(trace)
    }

    /// Advance one frame.
    pub fn step(&mut self) -> Result<FrameCounters> {
        self.frame += 1;
        let t = self.frame;
        let mut fc = FrameCounters::default();

        self.generate_traffic(t);
        let on = self.devices.iter().filter(|d| d.is_on()).count() as u32;
        fc.active = on;
        fc.attempted = on;

        self.assign();

        let s = self.cfg.radio.sensing_offset();
        let (start, end) = ((t - 1) as f64, t as f64);
        for c in 0..self.channels.len() {
            if let Some(d) = self.to_sense[c].take() {
                self.channels[c].advance_to(start + s);
                fc.sensings += 1;
                self.totals.sensings += 1;
                let result = sense(&self.channels[c].pu, &self.cfg.radio, &mut self.radio_rngs[d]);
                if result == SenseResult::Busy {
                    self.log(FrameEvent::SensedBusy { device: d, channel: c });
                    self.values.update(d, c, 0.0)?;
                    self.enter_wait(d, t);
                    self.channels[c].advance_to(end);
                    continue;
                }
                self.log(FrameEvent::SensedFree { device: d, channel: c });
                match self.grant(c, t)? {
                    Some(t_skip) => {
                        self.start_window(d, c, t_skip, false);
                        self.transmit(d, c, 1.0 - s, t, &mut fc)?;
                    }
                    None => {
                        self.totals.declines += 1;
                        self.enter_wait(d, t);
                        self.channels[c].advance_to(end);
                    }
                }
            } else if let Some(d) = self.channels[c].occupant {
                self.transmit(d, c, 1.0, t, &mut fc)?;
            } else {
                self.channels[c].advance_to(end);
            }
        }

        for d in 0..self.devices.len() {
            let dev = &mut self.devices[d];
            if dev.lifecycle == Lifecycle::Wait && dev.last_tx != t {
                dev.payload -= 1;
                if dev.payload == 0 {
                    dev.lifecycle = Lifecycle::Idle;
                }
            }
        }
        Ok(fc)
    }

    fn generate_traffic(&mut self, t: u64) {
        for (d, dev) in self.devices.iter_mut().enumerate() {
            let clock = match dev.traffic {
                SuTrafficParams::Periodic { .. } => t + dev.phase as u64,
                SuTrafficParams::EventDriven { .. } => t,
            };
            let demand = su_generate(&dev.traffic, clock, &mut self.su_rngs[d]);
            if demand > 0 && dev.lifecycle == Lifecycle::Idle {
                dev.lifecycle = Lifecycle::Wait;
                dev.payload = demand;
                dev.wait_since = t;
            }
        }
    }

    /// Hand out unused windows first, longest waiter first, then run the
    /// channel assignment over the remaining free channels.
    fn assign(&mut self) {
        self.waiting.clear();
        self.waiting.extend(
            self.devices
                .iter()
                .filter(|d| d.lifecycle == Lifecycle::Wait)
                .map(|d| d.id),
        );
        self.waiting
            .sort_by_key(|&d| (self.devices[d].wait_since, d));

        let mut next = 0;
        for c in 0..self.channels.len() {
            let ch = &self.channels[c];
            if ch.occupant.is_some() || ch.residue == 0 {
                continue;
            }
            if next < self.waiting.len() {
                let d = self.waiting[next];
                next += 1;
                let residue = self.channels[c].residue;
                self.channels[c].residue = 0;
                self.start_window(d, c, residue, true);
            } else {
                self.channels[c].residue -= 1;
            }
        }
        self.waiting.drain(..next);
        self.waiting.sort_unstable();

        self.pool.clear();
        self.pool.extend(
            (0..self.channels.len())
                .filter(|&c| self.channels[c].occupant.is_none() && self.channels[c].residue == 0),
        );
        let assignment = hill_climb(
            &self.values,
            &self.waiting,
            &self.pool,
            &mut self.assign_rng,
            &self.cfg.assign,
        );
        for &(d, c) in assignment.pairs() {
            self.devices[d].lifecycle = Lifecycle::Sense { channel: c };
            self.to_sense[c] = Some(d);
        }
    }

    fn grant(&mut self, c: usize, t: u64) -> Result<Option<u32>> {
        let t_skip = match &mut self.predictor {
            Predictor::None if self.policy == Policy::Genie => {
                let pu = &self.channels[c].pu;
                if pu.is_active() {
                    0
                } else {
                    // Whole frames from the start of this one until the
                    // primary user returns.
                    (pu.next_transition() - (t - 1) as f64).floor().min(u32::MAX as f64) as u32
                }
            }
            Predictor::None => 1,
            Predictor::Dirichlet(model, ex) => {
                let eps = ex.epsilon(c, t);
                model.predict(c, eps, &mut self.residual_rng)?.t_skip
            }
            Predictor::Parametric(model) => model.predict(c, &mut self.residual_rng)?.t_skip,
        };
        Ok((t_skip >= 1).then_some(t_skip))
    }

    fn enter_wait(&mut self, d: usize, t: u64) {
        let dev = &mut self.devices[d];
        dev.lifecycle = Lifecycle::Wait;
        dev.wait_since = t;
    }

    fn start_window(&mut self, d: usize, c: usize, t_skip: u32, handoff: bool) {
        self.devices[d].lifecycle = Lifecycle::Active {
            channel: c,
            skip_left: t_skip,
        };
        self.devices[d].window = Window::default();
        self.channels[c].occupant = Some(d);
        self.totals.grants += 1;
        if handoff {
            self.totals.handoffs += 1;
        }
        self.log(FrameEvent::SkipGranted {
            device: d,
            channel: c,
            t_skip,
            handoff,
        });
    }

    fn transmit(&mut self, d: usize, c: usize, len: f64, t: u64, fc: &mut FrameCounters) -> Result<()> {
        let outcome = self.channels[c].transmit(t as f64, self.cfg.radio.channel_error, &mut self.radio_rngs[d])?;
        let dev = &mut self.devices[d];
        let Lifecycle::Active { skip_left, .. } = &mut dev.lifecycle else {
            unreachable!("transmitting device must be active");
        };
        *skip_left -= 1;
        let skip_left = *skip_left;
        dev.payload -= 1;
        dev.last_tx = t;
        dev.window.frames += 1;
        match outcome {
            FrameOutcome::PuOverlap => {
                fc.collisions += 1;
                fc.pu_overlaps += 1;
                self.totals.pu_overlap_frames += 1;
            }
            FrameOutcome::ChannelError => {
                fc.collisions += 1;
                self.totals.channel_error_frames += 1;
            }
            FrameOutcome::Delivered => dev.window.delivered += len,
        }
        let payload = dev.payload;
        let window = dev.window;
        let collided = outcome == FrameOutcome::PuOverlap;
        if !(collided || payload == 0 || skip_left == 0) {
            return Ok(());
        }

        // The window is over.
        self.channels[c].occupant = None;
        let tau = window.frames as f64;
        if collided {
            self.totals.tx_collisions += 1;
            self.log(FrameEvent::TxCollision {
                device: d,
                channel: c,
                frames_before: window.frames - 1,
            });
            self.values.update(d, c, 0.0)?;
        } else {
            let throughput = window.delivered * self.capacity.get(d, c);
            self.totals.successes += 1;
            self.totals.throughput += throughput;
            fc.throughput += throughput;
            self.log(FrameEvent::TxSuccess {
                device: d,
                channel: c,
                frames: window.frames,
                delivered: window.delivered,
                throughput,
            });
            self.values.update(d, c, throughput)?;
            if payload == 0 && skip_left > 0 {
                self.channels[c].residue = skip_left;
            }
        }
        match &mut self.predictor {
            Predictor::Dirichlet(model, ex) => {
                if collided {
                    model.update_terminal(c, tau, t)?;
                } else {
                    model.update(c, tau, t)?;
                }
                ex.record(c, collided as u64, window.frames as u64, &mut self.explore_rng);
            }
            Predictor::Parametric(model) => model.update(c, tau)?,
            Predictor::None => {}
        }
        if payload == 0 {
            self.devices[d].lifecycle = Lifecycle::Idle;
        } else {
            self.enter_wait(d, t);
        }
        Ok(())
    }

    /// Structural invariants that must hold between frames.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut active = 0u64;
        for dev in &self.devices {
            match dev.lifecycle {
                Lifecycle::Idle => {
                    if dev.payload != 0 {
                        return Err(format!("idle device {} holds payload", dev.id));
                    }
                }
                Lifecycle::Wait => {
                    if dev.payload == 0 {
                        return Err(format!("waiting device {} has no payload", dev.id));
                    }
                }
                Lifecycle::Sense { .. } => {
                    return Err(format!("device {} left in sensing state", dev.id));
                }
                Lifecycle::Active { channel, skip_left } => {
                    active += 1;
                    if skip_left == 0 || dev.payload == 0 {
                        return Err(format!("device {} active with an exhausted window", dev.id));
                    }
                    if self.channels[channel].occupant != Some(dev.id) {
                        return Err(format!(
                            "device {} active on channel {channel} it does not hold",
                            dev.id
                        ));
                    }
                }
            }
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if let Some(d) = ch.occupant {
                match self.devices[d].lifecycle {
                    Lifecycle::Active { channel, .. } if channel == c => {}
                    _ => return Err(format!("channel {c} held by inactive device {d}")),
                }
                if ch.residue != 0 {
                    return Err(format!("channel {c} has both an occupant and a residue"));
                }
            }
        }
        let tot = &self.totals;
        if tot.grants != tot.successes + tot.tx_collisions + active {
            return Err(format!(
                "grants {} != successes {} + collisions {} + open {}",
                tot.grants, tot.successes, tot.tx_collisions, active
            ));
        }
        let notified: u64 = self.channels.iter().map(|c| c.notifications).sum();
        if notified != tot.pu_overlap_frames || tot.pu_overlap_frames != tot.tx_collisions {
            return Err(format!(
                "overlap frames {} vs notifications {notified} vs collided windows {}",
                tot.pu_overlap_frames, tot.tx_collisions
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::PuState;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn quiet() -> PuTrafficModel {
        PuTrafficModel::Exponential {
            mean_on: 1.0,
            mean_off: 1e12,
        }
    }

    fn idle_pu(remaining: f64) -> PuProcess {
        PuProcess::with_state(quiet(), PuState::Idle, remaining, CollisionMode::Restart)
    }

    fn ideal_radio() -> RadioConfig {
        RadioConfig {
            p_detect: 1.0,
            p_false_alarm: 0.0,
            channel_error: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn perfect_detector() {
        let radio = RadioConfig {
            p_detect: 1.0,
            p_false_alarm: 0.0,
            ..Default::default()
        };
        let on = PuProcess::with_state(quiet(), PuState::Active, 5.0, CollisionMode::Restart);
        let off = idle_pu(5.0);
        let mut r = rng(1);
        for _ in 0..1000 {
            assert_eq!(sense(&on, &radio, &mut r), SenseResult::Busy);
            assert_eq!(sense(&off, &radio, &mut r), SenseResult::Free);
        }
    }

    #[test]
    fn false_alarm_rate() {
        let radio = RadioConfig::default();
        let off = idle_pu(5.0);
        let mut r = rng(2);
        let n = 100_000;
        let busy = (0..n)
            .filter(|_| sense(&off, &radio, &mut r) == SenseResult::Busy)
            .count();
        let f = busy as f64 / n as f64;
        assert!((f - 0.05).abs() < 0.005, "{f}");
    }

    #[test]
    fn unobstructed_window() {
        let radio = RadioConfig {
            sensing_ms: 0.0,
            ..ideal_radio()
        };
        let mut pu = idle_pu(100.0);
        let (mut a, mut b, mut c) = (rng(1), rng(2), rng(3));
        let (ev, rep) =
            transmit_window(0, 0, 10, 5, 2.5, true, &mut pu, &radio, &mut a, &mut b, &mut c)
                .unwrap();
        assert_eq!(
            ev,
            FrameEvent::TxSuccess {
                device: 0,
                channel: 0,
                frames: 5,
                delivered: 5.0,
                throughput: 12.5
            }
        );
        assert_eq!(rep.pu_overlaps, 0);
        assert!((pu.time_remaining() - 95.0).abs() < 1e-9);
    }

    #[test]
    fn sensed_first_frame_is_shortened() {
        let radio = ideal_radio();
        let mut pu = idle_pu(100.0);
        let (mut a, mut b, mut c) = (rng(1), rng(2), rng(3));
        let (ev, _) =
            transmit_window(0, 0, 3, 3, 1.0, true, &mut pu, &radio, &mut a, &mut b, &mut c)
                .unwrap();
        let FrameEvent::TxSuccess { delivered, .. } = ev else { panic!("{ev:?}") };
        assert!((delivered - 2.8).abs() < 1e-12);
    }

    #[test]
    fn first_overlap_ends_window() {
        let radio = RadioConfig {
            sensing_ms: 0.0,
            ..ideal_radio()
        };
        // The primary user returns during the third frame.
        let mut pu = idle_pu(2.5);
        let (mut a, mut b, mut c) = (rng(1), rng(2), rng(3));
        let (ev, rep) =
            transmit_window(0, 0, 10, 10, 1.0, false, &mut pu, &radio, &mut a, &mut b, &mut c)
                .unwrap();
        assert_eq!(
            ev,
            FrameEvent::TxCollision {
                device: 0,
                channel: 0,
                frames_before: 2
            }
        );
        assert_eq!(rep.frames, 3);
        assert!(pu.is_active());
    }

    #[test]
    fn channel_error_rate() {
        let radio = RadioConfig {
            channel_error: 0.05,
            sensing_ms: 0.0,
            ..ideal_radio()
        };
        let mut pu = idle_pu(1e9);
        let (mut a, mut b, mut c) = (rng(1), rng(2), rng(3));
        let (_, rep) = transmit_window(
            0, 0, 100_000, 100_000, 1.0, false, &mut pu, &radio, &mut a, &mut b, &mut c,
        )
        .unwrap();
        let f = rep.channel_errors as f64 / rep.frames as f64;
        assert!((f - 0.05).abs() < 0.003, "{f}");
    }

    fn scenario(channels: Vec<PuTrafficModel>, devices: Vec<SuTrafficParams>) -> Scenario {
        let capacity = Capacity::constant(devices.len(), channels.len(), 2.0);
        Scenario {
            channels,
            devices,
            capacity,
        }
    }

    fn ideal_cfg() -> EngineConfig {
        EngineConfig {
            radio: ideal_radio(),
            ..Default::default()
        }
    }

    #[test]
    fn no_demand_leaves_devices_idle() {
        let sc = scenario(
            vec![quiet(); 2],
            vec![
                SuTrafficParams::EventDriven {
                    alarm_prob: 0.0,
                    mean_on: 5.0
                };
                3
            ],
        );
        let mut sim = Simulation::new(&sc, &ideal_cfg(), Policy::ProposedSpsa, StreamSeeds::new(1, 0)).unwrap();
        let trace = sim.run(200).unwrap();
        assert_eq!(trace.total(crate::metrics::Metric::Sensing), 0.0);
        assert!(sim.devices().iter().all(|d| d.lifecycle == Lifecycle::Idle));
        assert_eq!(sim.values(), &ValueTable::new(2, 3, 0.5).unwrap());
    }

    #[test]
    fn lone_device_on_a_quiet_channel_delivers_everything() {
        let sc = scenario(
            vec![quiet()],
            vec![SuTrafficParams::Periodic { on: 5, interval: 10 }],
        );
        for policy in Policy::ALL {
            let mut sim = Simulation::new(&sc, &ideal_cfg(), policy, StreamSeeds::new(3, 0)).unwrap();
            sim.record_events(true);
            let trace = sim.run(1000).unwrap();
            assert_eq!(trace.total(crate::metrics::Metric::Collisions), 0.0, "{policy}");
            let sent: u32 = sim
                .events()
                .iter()
                .filter_map(|(_, e)| match e {
                    FrameEvent::TxSuccess { frames, .. } => Some(*frames),
                    _ => None,
                })
                .sum();
            let offered: u32 = trace.attempted.iter().sum();
            let open = match sim.devices()[0].lifecycle {
                Lifecycle::Active { .. } => sim.devices()[0].window.frames,
                _ => 0,
            };
            assert_eq!(sent + open, offered, "{policy}");
            sim.check_invariants().unwrap();
        }
    }

    #[test]
    fn traditional_senses_every_frame() {
        let sc = scenario(
            vec![quiet()],
            vec![SuTrafficParams::Periodic { on: 7, interval: 20 }],
        );
        let cfg = ideal_cfg();
        let mut trad = Simulation::new(&sc, &cfg, Policy::Traditional, StreamSeeds::new(5, 0)).unwrap();
        let t = trad.run(2000).unwrap();
        assert_eq!(t.sensings, t.attempted);

        let mut prop = Simulation::new(&sc, &cfg, Policy::ProposedFixed, StreamSeeds::new(5, 0)).unwrap();
        let p = prop.run(2000).unwrap();
        let ps: u32 = p.sensings.iter().sum();
        let ts: u32 = t.sensings.iter().sum();
        assert!(ps < ts / 3, "{ps} vs {ts}");
    }

    #[test]
    fn genie_declines_when_the_channel_is_busy() {
        // Missed detections only: the genie sees the primary user is on.
        let radio = RadioConfig {
            p_detect: 0.0,
            p_false_alarm: 0.0,
            channel_error: 0.0,
            ..Default::default()
        };
        let busy = PuTrafficModel::Exponential {
            mean_on: 1e12,
            mean_off: 1e-6,
        };
        let sc = scenario(
            vec![busy],
            vec![SuTrafficParams::Periodic { on: 3, interval: 5 }],
        );
        let cfg = EngineConfig {
            radio,
            ..Default::default()
        };
        let mut sim = Simulation::new(&sc, &cfg, Policy::Genie, StreamSeeds::new(2, 0)).unwrap();
        let trace = sim.run(100).unwrap();
        assert_eq!(sim.totals().grants, 0);
        assert!(sim.totals().declines > 0);
        assert_eq!(trace.total(crate::metrics::Metric::Collisions), 0.0);
    }
}
