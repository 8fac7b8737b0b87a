//! Longitudinal three-vehicle scenario: the ego vehicle (EV) drives in the
//! left lane beside a target vehicle (TV) that follows a braking preceding
//! vehicle (PV) in the right lane.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{compute_ttc, FeatureError, FeatureVector, Intention, KinematicSnapshot, ScenarioPreset};
use crate::protocol::{perceive, ActuationCommand, LinkError, Message, PerceptionClient, PredictionServer, Session};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("prediction is enabled but no prediction link was given")]
    LinkRequired,
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("trace line {line}: {msg}")]
    Trace { line: u64, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleId {
    Ev,
    Tv,
    Pv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Left,
    Right,
}

impl Lane {
    pub fn as_str(self) -> &'static str {
        match self {
            Lane::Left => "left",
            Lane::Right => "right",
        }
    }
}

impl FromStr for Lane {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left" => Ok(Lane::Left),
            "right" => Ok(Lane::Right),
            _ => Err(format!("unknown lane `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub lane: Lane,
    pub s: f64,
    pub v: f64,
    pub a: f64,
}

impl VehicleState {
    /// Constant-acceleration update; a vehicle that would reverse stops where `v` hits zero.
    pub fn advance(&mut self, dt: f64) {
        let v_next = self.v + self.a * dt;
        if v_next >= 0.0 {
            self.s += self.v * dt + 0.5 * self.a * dt * dt;
            self.v = v_next;
        } else {
            let tau = -self.v / self.a;
            self.s += self.v * tau + 0.5 * self.a * tau * tau;
            self.v = 0.0;
        }
    }
}

/// Scenario parameters. Keys in the config file match the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub tick_dt: f64,
    pub duration: f64,
    pub perception_rate_hz: f64,
    pub prediction_enabled: bool,
    pub vehicle_length: f64,
    pub a_max: f64,
    pub ev_s0: f64,
    pub ev_v0: f64,
    pub tv_s0: f64,
    pub tv_v0: f64,
    pub pv_s0: f64,
    pub pv_v0: f64,
    /// Road position at which the PV starts braking.
    pub pv_brake_trigger_s: f64,
    pub pv_brake_decel: f64,
    pub pv_target_speed: f64,
    /// The TV wants to leave its lane when TTC to the PV is in `[0, tv_urgency_ttc)`.
    pub tv_urgency_ttc: f64,
    /// Required EV-side gap as a multiple of the follower's stopping distance.
    pub tv_gap_factor: f64,
    pub tv_gap_margin: f64,
    pub tv_crossing_duration: f64,
    pub tv_emergency_ttc: f64,
    pub tv_emergency_decel: f64,
    pub ev_brake_decel: f64,
    pub rng_seed: u64,
    /// Half-width of uniform noise added to the perceived TV-PV gap, meters.
    pub perception_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            tick_dt: 1.0 / 15.0,
            duration: 14.0,
            perception_rate_hz: 15.0,
            prediction_enabled: true,
            vehicle_length: 4.0,
            a_max: 8.0,
            ev_s0: 0.0,
            ev_v0: 10.0,
            tv_s0: 0.0,
            tv_v0: 10.0,
            pv_s0: 44.0,
            pv_v0: 10.0,
            pv_brake_trigger_s: 74.0,
            pv_brake_decel: 3.0,
            pv_target_speed: 4.0,
            tv_urgency_ttc: 4.0,
            tv_gap_factor: 1.5,
            tv_gap_margin: 1.0,
            tv_crossing_duration: 1.2,
            tv_emergency_ttc: 1.5,
            tv_emergency_decel: 6.0,
            ev_brake_decel: 3.0,
            rng_seed: 0,
            perception_noise: 0.0,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            tick_dt,
            duration,
            perception_rate_hz,
            prediction_enabled,
            vehicle_length,
            a_max,
            ev_s0,
            ev_v0,
            tv_s0,
            tv_v0,
            pv_s0,
            pv_v0,
            pv_brake_trigger_s,
            pv_brake_decel,
            pv_target_speed,
            tv_urgency_ttc,
            tv_gap_factor,
            tv_gap_margin,
            tv_crossing_duration,
            tv_emergency_ttc,
            tv_emergency_decel,
            ev_brake_decel,
            rng_seed,
            perception_noise
        )
    };
}

impl ScenarioConfig {
    /// `(key, value)` pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        macro_rules! collect {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.to_string())),*] };
        }
        config_fields!(collect)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        macro_rules! dispatch {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => { self.$f = parse(value)?; Ok(()) })*
                    _ => Err(format!("unknown key `{key}`")),
                }
            };
        }
        config_fields!(dispatch)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SimError::Config {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            c.set(k.trim(), v.trim())
                .map_err(|msg| SimError::Config { line: i + 1, msg })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("tick_dt", self.tick_dt),
            ("duration", self.duration),
            ("perception_rate_hz", self.perception_rate_hz),
            ("vehicle_length", self.vehicle_length),
            ("a_max", self.a_max),
            ("pv_brake_decel", self.pv_brake_decel),
            ("tv_crossing_duration", self.tv_crossing_duration),
            ("tv_emergency_decel", self.tv_emergency_decel),
            ("ev_brake_decel", self.ev_brake_decel),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Invalid(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("pv_brake_decel", self.pv_brake_decel),
            ("tv_emergency_decel", self.tv_emergency_decel),
            ("ev_brake_decel", self.ev_brake_decel),
        ] {
            if v > self.a_max {
                return Err(SimError::Invalid(format!("{k} exceeds a_max")));
            }
        }
        for (k, v) in [
            ("ev_v0", self.ev_v0),
            ("tv_v0", self.tv_v0),
            ("pv_v0", self.pv_v0),
            ("pv_target_speed", self.pv_target_speed),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Invalid(format!("{k} must be non-negative")));
            }
        }
        if self.perception_noise.is_nan() || self.perception_noise < 0.0 {
            return Err(SimError::Invalid("perception_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Ticks between perception updates.
    pub fn perception_period(&self) -> usize {
        ((1.0 / (self.perception_rate_hz * self.tick_dt)).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvMode {
    Cruise,
    LaneChange,
    Emergency,
    Follow,
    Merged,
}

impl TvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TvMode::Cruise => "cruise",
            TvMode::LaneChange => "lane_change",
            TvMode::Emergency => "emergency",
            TvMode::Follow => "follow",
            TvMode::Merged => "merged",
        }
    }
}

impl FromStr for TvMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            TvMode::Cruise,
            TvMode::LaneChange,
            TvMode::Emergency,
            TvMode::Follow,
            TvMode::Merged,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown tv mode `{s}`"))
    }
}

/// Decision of the TV policy for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TvAction {
    Keep { accel: f64 },
    BeginLaneChange,
    EmergencyBrake { accel: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub t: f64,
    pub ev: VehicleState,
    pub tv: VehicleState,
    pub pv: VehicleState,
    pub tv_mode: TvMode,
    pub lane_change_start: Option<f64>,
    pub ev_latched: bool,
}

impl World {
    pub fn new(c: &ScenarioConfig) -> Self {
        let v = |id, lane, s, v| VehicleState { id, lane, s, v, a: 0.0 };
        Self {
            t: 0.0,
            ev: v(VehicleId::Ev, Lane::Left, c.ev_s0, c.ev_v0),
            tv: v(VehicleId::Tv, Lane::Right, c.tv_s0, c.tv_v0),
            pv: v(VehicleId::Pv, Lane::Right, c.pv_s0, c.pv_v0),
            tv_mode: TvMode::Cruise,
            lane_change_start: None,
            ev_latched: false,
        }
    }

    /// Ground-truth TV-to-PV kinematics; the gap is infinite once the TV has left the PV's lane.
    pub fn tv_snapshot(&self, length: f64) -> KinematicSnapshot {
        let gap = if self.tv.lane == self.pv.lane && self.pv.s >= self.tv.s {
            (self.pv.s - self.tv.s - length).max(0.0)
        } else {
            f64::INFINITY
        };
        KinematicSnapshot::new(gap, self.tv.v, self.pv.v, self.t).expect("simulated kinematics are valid")
    }

    /// Integrates all vehicles over `dt` and completes a due lane change.
    pub fn step(&mut self, dt: f64, c: &ScenarioConfig) {
        for v in [&mut self.ev, &mut self.tv, &mut self.pv] {
            v.advance(dt);
        }
        self.t += dt;
        if self.tv_mode == TvMode::LaneChange {
            let since = self.lane_change_start.expect("lane change has a start");
            if self.t - since >= c.tv_crossing_duration - 1e-9 {
                self.tv.lane = Lane::Left;
                self.tv_mode = TvMode::Merged;
            }
        }
    }
}

/// Brakes toward a speed without overshooting it within one tick.
fn brake_toward(v: f64, target: f64, decel: f64, dt: f64) -> f64 {
    if v > target {
        -decel.min((v - target) / dt)
    } else {
        0.0
    }
}

pub fn pv_policy(w: &World, c: &ScenarioConfig) -> f64 {
    if w.pv.s >= c.pv_brake_trigger_s {
        brake_toward(w.pv.v, c.pv_target_speed, c.pv_brake_decel, c.tick_dt)
    } else {
        0.0
    }
}

/// Lane change when urgent and the EV-side gap exceeds the follower's
/// stopping distance with margin; emergency braking when TTC gets short.
pub fn tv_policy(w: &World, c: &ScenarioConfig, pv_accel: f64) -> TvAction {
    if w.tv.lane != Lane::Right || matches!(w.tv_mode, TvMode::LaneChange | TvMode::Merged) {
        return TvAction::Keep { accel: 0.0 };
    }
    let ttc = compute_ttc(&w.tv_snapshot(c.vehicle_length));
    let d = w.tv.s - w.ev.s;
    let gap_ev = d.abs() - c.vehicle_length;
    let stopping = if d > 0.0 {
        w.ev.v * w.ev.v / (2.0 * c.ev_brake_decel)
    } else {
        w.tv.v * w.tv.v / (2.0 * c.tv_emergency_decel)
    };
    let urgent = (0.0..c.tv_urgency_ttc).contains(&ttc);
    if urgent && gap_ev >= c.tv_gap_factor * stopping + c.tv_gap_margin {
        return TvAction::BeginLaneChange;
    }
    if (0.0..c.tv_emergency_ttc).contains(&ttc) || w.tv_mode == TvMode::Emergency {
        if w.tv.v > w.pv.v {
            return TvAction::EmergencyBrake {
                accel: brake_toward(w.tv.v, w.pv.v, c.tv_emergency_decel, c.tick_dt),
            };
        }
        return TvAction::Keep { accel: pv_accel };
    }
    if w.tv_mode == TvMode::Follow && w.tv.v >= w.pv.v {
        return TvAction::Keep { accel: pv_accel };
    }
    TvAction::Keep { accel: 0.0 }
}

fn apply_tv_action(w: &mut World, action: TvAction) {
    match action {
        TvAction::BeginLaneChange => {
            w.tv_mode = TvMode::LaneChange;
            w.lane_change_start = Some(w.t);
            w.tv.a = 0.0;
        }
        TvAction::EmergencyBrake { accel } => {
            w.tv_mode = TvMode::Emergency;
            w.tv.a = accel;
        }
        TvAction::Keep { accel } => {
            if w.tv_mode == TvMode::Emergency {
                w.tv_mode = TvMode::Follow;
            }
            w.tv.a = accel;
        }
    }
}

/// EV acceleration. With prediction enabled a BRAKE latches until standstill
/// and the EV then stays stopped; otherwise the EV holds its speed.
pub fn ev_policy(latched: &mut bool, command: Option<ActuationCommand>, ev: &VehicleState, c: &ScenarioConfig) -> f64 {
    if !c.prediction_enabled {
        return 0.0;
    }
    if command == Some(ActuationCommand::Brake) {
        *latched = true;
    }
    if *latched {
        brake_toward(ev.v, 0.0, c.ev_brake_decel, c.tick_dt)
    } else {
        0.0
    }
}

/// A prediction exchange for one perception tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkReply {
    pub intention: Intention,
    pub probabilities: [f64; 3],
    pub actuation: ActuationCommand,
    pub latency: Duration,
}

pub trait PredictionLink {
    fn exchange(&mut self, timestamp_ms: u64, features: FeatureVector) -> Result<LinkReply, LinkError>;
}

/// Runs the server's line handler directly, through the same encode/decode path.
pub struct InProcessLink {
    server: PredictionServer,
    session: Session,
    seq: u64,
}

impl InProcessLink {
    pub fn new(server: PredictionServer) -> Self {
        Self {
            server,
            session: Session::default(),
            seq: 0,
        }
    }
}

impl PredictionLink for InProcessLink {
    fn exchange(&mut self, timestamp_ms: u64, features: FeatureVector) -> Result<LinkReply, LinkError> {
        self.seq += 1;
        let start = Instant::now();
        let line = Message::Feature(crate::protocol::FeatureMessage {
            seq: self.seq,
            timestamp_ms,
            features,
        })
        .encode();
        let handled = self.server.handle_line(&mut self.session, line.as_bytes());
        let reply = Message::decode(&handled.reply.encode())?;
        let latency = start.elapsed();
        match (reply, handled.actuation) {
            (Message::Prediction(p), Some(actuation)) if p.seq == self.seq => Ok(LinkReply {
                intention: p.intention,
                probabilities: p.probabilities,
                actuation,
                latency,
            }),
            (Message::Error { seq, reason }, _) => Err(LinkError::Server { seq, reason }),
            (other, _) => Err(LinkError::Unexpected(other.encode())),
        }
    }
}

/// Socket link. With an actuation stream the command is read back from the
/// server's actuation channel; without one it is derived from the reply.
pub struct TcpLink {
    client: PerceptionClient,
    actuation: Option<BufReader<TcpStream>>,
}

impl TcpLink {
    pub fn new(client: PerceptionClient, actuation: Option<TcpStream>) -> Self {
        Self {
            client,
            actuation: actuation.map(BufReader::new),
        }
    }
}

impl PredictionLink for TcpLink {
    fn exchange(&mut self, timestamp_ms: u64, features: FeatureVector) -> Result<LinkReply, LinkError> {
        let start = Instant::now();
        let (p, _) = self.client.request(timestamp_ms, features)?;
        let actuation = match &mut self.actuation {
            Some(r) => {
                let mut line = String::new();
                if r.read_line(&mut line)? == 0 {
                    return Err(LinkError::Closed);
                }
                match Message::decode(line.trim_end_matches('\n'))? {
                    Message::Actuation(cmd) => cmd,
                    other => return Err(LinkError::Unexpected(other.encode())),
                }
            }
            None => ActuationCommand::from_intention(p.intention),
        };
        Ok(LinkReply {
            intention: p.intention,
            probabilities: p.probabilities,
            actuation,
            latency: start.elapsed(),
        })
    }
}

/// One simulation tick: states at `t` with the accelerations applied over the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub vehicles: [VehicleState; 3],
    pub tv_mode: TvMode,
    pub features: Option<FeatureVector>,
    pub intention: Option<Intention>,
    pub actuation: Option<ActuationCommand>,
}

impl TraceRow {
    pub fn ev(&self) -> &VehicleState {
        &self.vehicles[0]
    }
    pub fn tv(&self) -> &VehicleState {
        &self.vehicles[1]
    }
    pub fn pv(&self) -> &VehicleState {
        &self.vehicles[2]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioTrace {
    pub rows: Vec<TraceRow>,
}

const TRACE_HEADER: [&str; 17] = [
    "t",
    "ev_s",
    "ev_v",
    "ev_a",
    "ev_lane",
    "tv_s",
    "tv_v",
    "tv_a",
    "tv_lane",
    "pv_s",
    "pv_v",
    "pv_a",
    "pv_lane",
    "tv_mode",
    "features",
    "intention",
    "actuation",
];

impl ScenarioTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.t.to_string()];
            for v in &r.vehicles {
                rec.extend([
                    v.s.to_string(),
                    v.v.to_string(),
                    v.a.to_string(),
                    v.lane.as_str().to_string(),
                ]);
            }
            rec.push(r.tv_mode.as_str().into());
            rec.push(r.features.map(|f| f.to_tokens()).unwrap_or_default());
            rec.push(r.intention.map(|h| h.to_string()).unwrap_or_default());
            rec.push(r.actuation.map(|a| a.as_str().to_string()).unwrap_or_default());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is ascii")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(r);
        if rdr.headers()?.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(SimError::Trace {
                line: 1,
                msg: "unexpected header".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| SimError::Trace { line, msg };
            let num = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("invalid number `{}`", &rec[i])))
            };
            let opt = |i: usize| (!rec[i].is_empty()).then(|| &rec[i]);
            let ids = [VehicleId::Ev, VehicleId::Tv, VehicleId::Pv];
            let mut vehicles = Vec::with_capacity(3);
            for (k, id) in ids.into_iter().enumerate() {
                let base = 1 + 4 * k;
                vehicles.push(VehicleState {
                    id,
                    s: num(base)?,
                    v: num(base + 1)?,
                    a: num(base + 2)?,
                    lane: rec[base + 3].parse().map_err(bad)?,
                });
            }
            rows.push(TraceRow {
                t: num(0)?,
                vehicles: [vehicles[0], vehicles[1], vehicles[2]],
                tv_mode: rec[13].parse().map_err(bad)?,
                features: opt(14)
                    .map(FeatureVector::parse_tokens)
                    .transpose()
                    .map_err(|e| bad(e.to_string()))?,
                intention: opt(15).map(str::parse).transpose().map_err(bad)?,
                actuation: opt(16)
                    .map(|s| match s {
                        "BRAKE" => Ok(ActuationCommand::Brake),
                        "CRUISE" => Ok(ActuationCommand::Cruise),
                        other => Err(bad(format!("unknown actuation `{other}`"))),
                    })
                    .transpose()?,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        self.write_csv(std::io::BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::read_csv(fs::File::open(path)?)
    }
}

/// Summary numbers; every field is recomputable from the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMetrics {
    pub first_llc_time: Option<f64>,
    pub lane_change_start: Option<f64>,
    pub crossing_time: Option<f64>,
    pub ev_brake_onset: Option<f64>,
    /// Crossing time minus first LLC prediction.
    pub anticipation_horizon: Option<f64>,
    /// Crossing time minus EV brake onset.
    pub ev_brake_lead: Option<f64>,
    pub tv_emergency_time: Option<f64>,
    pub tv_min_accel: f64,
    pub tv_min_speed: f64,
    pub tv_max_speed: f64,
    pub ev_max_abs_accel: f64,
    /// Smallest bumper gap while the TV and EV share a lane.
    pub min_gap_tv_ev: f64,
    pub collision: bool,
}

impl ScenarioMetrics {
    pub fn from_trace(trace: &ScenarioTrace, vehicle_length: f64) -> Self {
        let first = |f: &dyn Fn(&TraceRow) -> bool| trace.rows.iter().find(|r| f(r)).map(|r| r.t);
        let first_llc_time = first(&|r| r.intention == Some(Intention::Llc));
        let crossing_time = first(&|r| r.tv().lane == Lane::Left);
        let ev_brake_onset = first(&|r| r.ev().a < 0.0);
        let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        let fold =
            |f: &dyn Fn(&TraceRow) -> f64, init: f64, g: fn(f64, f64) -> f64| trace.rows.iter().map(f).fold(init, g);
        let mut min_gap = f64::INFINITY;
        let mut collision = false;
        for r in &trace.rows {
            let [ev, tv, pv] = &r.vehicles;
            for (a, b) in [(tv, pv), (ev, tv), (ev, pv)] {
                if a.lane == b.lane {
                    let gap = (a.s - b.s).abs() - vehicle_length;
                    collision |= gap < 0.0;
                    if (a.id, b.id) == (VehicleId::Ev, VehicleId::Tv) {
                        min_gap = min_gap.min(gap);
                    }
                }
            }
        }
        Self {
            first_llc_time,
            lane_change_start: first(&|r| r.tv_mode == TvMode::LaneChange),
            crossing_time,
            ev_brake_onset,
            anticipation_horizon: diff(crossing_time, first_llc_time),
            ev_brake_lead: diff(crossing_time, ev_brake_onset),
            tv_emergency_time: first(&|r| r.tv_mode == TvMode::Emergency),
            tv_min_accel: fold(&|r| r.tv().a, 0.0, f64::min),
            tv_min_speed: fold(&|r| r.tv().v, f64::INFINITY, f64::min),
            tv_max_speed: fold(&|r| r.tv().v, 0.0, f64::max),
            ev_max_abs_accel: fold(&|r| r.ev().a.abs(), 0.0, f64::max),
            min_gap_tv_ev: min_gap,
            collision,
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = |x: Option<f64>| x.map_or_else(|| "none".to_string(), |v| v.to_string());
        vec![
            ("first_llc_time", o(self.first_llc_time)),
            ("lane_change_start", o(self.lane_change_start)),
            ("crossing_time", o(self.crossing_time)),
            ("ev_brake_onset", o(self.ev_brake_onset)),
            ("anticipation_horizon", o(self.anticipation_horizon)),
            ("ev_brake_lead", o(self.ev_brake_lead)),
            ("tv_emergency_time", o(self.tv_emergency_time)),
            ("tv_emergency_brake", self.tv_emergency_time.is_some().to_string()),
            ("tv_min_accel", self.tv_min_accel.to_string()),
            ("tv_min_speed", self.tv_min_speed.to_string()),
            ("tv_max_speed", self.tv_max_speed.to_string()),
            ("ev_max_abs_accel", self.ev_max_abs_accel.to_string()),
            ("min_gap_tv_ev", self.min_gap_tv_ev.to_string()),
            ("collision", self.collision.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl fmt::Display for ScenarioMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Wall-clock behavior of one run; not part of the deterministic outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopTiming {
    pub exchanges: usize,
    pub latencies: Vec<Duration>,
    pub wall: Duration,
}

impl LoopTiming {
    pub fn mean_latency(&self) -> Duration {
        if self.latencies.is_empty() {
            return Duration::ZERO;
        }
        self.latencies.iter().sum::<Duration>() / self.latencies.len() as u32
    }

    /// Nearest-rank percentile.
    pub fn percentile(&self, q: f64) -> Duration {
        if self.latencies.is_empty() {
            return Duration::ZERO;
        }
        let mut v = self.latencies.clone();
        v.sort();
        let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    /// Iterations per second of wall-clock time.
    pub fn rate_hz(&self) -> f64 {
        self.exchanges as f64 / self.wall.as_secs_f64().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub trace: ScenarioTrace,
    pub metrics: ScenarioMetrics,
    pub timing: LoopTiming,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Sleep so each tick takes `tick_dt` of wall-clock time.
    pub realtime: bool,
}

/// Perception, prediction, actuation and dynamics, once per tick.
pub fn run_scenario(
    c: &ScenarioConfig,
    mut link: Option<&mut (dyn PredictionLink + '_)>,
    opts: RunOptions,
) -> Result<ScenarioRun, SimError> {
    c.validate()?;
    if c.prediction_enabled && link.is_none() {
        return Err(SimError::LinkRequired);
    }
    let preset = ScenarioPreset::default();
    let period = c.perception_period();
    let ticks = (c.duration / c.tick_dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(c.rng_seed);
    let mut w = World::new(c);
    let mut trace = ScenarioTrace::default();
    let mut latencies = Vec::new();
    let start = Instant::now();

    for k in 0..ticks {
        if opts.realtime {
            let due = start + Duration::from_secs_f64(k as f64 * c.tick_dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let mut features = None;
        let mut reply = None;
        if k % period == 0 {
            if let Some(link) = link.as_deref_mut() {
                let mut snap = w.tv_snapshot(c.vehicle_length);
                if c.perception_noise > 0.0 && snap.gap_to_preceding.is_finite() {
                    let noise = rng.gen_range(-c.perception_noise..=c.perception_noise);
                    snap = KinematicSnapshot::new(
                        (snap.gap_to_preceding + noise).max(0.0),
                        snap.tv_speed,
                        snap.pv_speed,
                        snap.timestamp,
                    )?;
                }
                let fv = perceive(&snap, &preset)?;
                let r = link.exchange((w.t * 1000.0).round() as u64, fv)?;
                latencies.push(r.latency);
                features = Some(fv);
                reply = Some(r);
            }
        }
        let command = reply.map(|r| r.actuation);
        w.ev.a = ev_policy(&mut w.ev_latched, command, &w.ev, c);
        w.pv.a = pv_policy(&w, c);
        let action = tv_policy(&w, c, w.pv.a);
        apply_tv_action(&mut w, action);
        trace.rows.push(TraceRow {
            t: w.t,
            vehicles: [w.ev, w.tv, w.pv],
            tv_mode: w.tv_mode,
            features,
            intention: reply.map(|r| r.intention),
            actuation: command,
        });
        w.step(c.tick_dt, c);
    }
    let metrics = ScenarioMetrics::from_trace(&trace, c.vehicle_length);
    Ok(ScenarioRun {
        trace,
        metrics,
        timing: LoopTiming {
            exchanges: latencies.len(),
            latencies,
            wall: start.elapsed(),
        },
    })
}

/// Parses a `key=value` metrics file.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
