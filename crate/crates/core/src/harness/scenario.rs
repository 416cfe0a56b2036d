//! Declarative run descriptions and their validated, tick-aligned plan.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ciot::{ChannelAccess, ChannelConfig, ChannelId, FieldSlot};
use crate::robot::{PathSpec, RobotConfig};
use crate::safety::{
    SensorPlacement, StalenessPolicy, ZoneThresholds, DEFAULT_MAX_RANGE, DEFAULT_QUANTUM,
};
use crate::sensor::{ObjectState, SensorNodeConfig, DEFAULT_NOISE_SIGMA};
use crate::supervisor::{
    sample_time_slot, slot_assignment, ReadSource, SupervisorConfig, DEFAULT_CLOCK_SKEW_GRACE,
    DEFAULT_TRANSPORT_GRACE, MAX_FENCE_SENSORS, SAMPLE_TIME_SLOT,
};
use crate::time::{micros_to_secs, secs_to_micros, Timestamp};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TICK: f64 = 0.01;
/// Staleness defaults to this many write intervals.
pub const DEFAULT_STALE_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_issues(issues: &[FieldIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("unsupported scenario schema_version {found} (this build reads {expected})")]
    Version { found: u64, expected: u32 },
    #[error("invalid scenario:\n{}", join_issues(.0))]
    Invalid(Vec<FieldIssue>),
}

fn d_tick() -> f64 {
    DEFAULT_TICK
}
fn d_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}
fn d_quantum() -> f64 {
    DEFAULT_QUANTUM
}
fn d_max_range() -> f64 {
    DEFAULT_MAX_RANGE
}
fn d_write() -> f64 {
    1.0
}
fn d_poll() -> f64 {
    crate::supervisor::DEFAULT_POLL_INTERVAL
}
fn d_min_write() -> f64 {
    crate::ciot::DEFAULT_MIN_WRITE_INTERVAL
}
fn d_grace() -> f64 {
    DEFAULT_CLOCK_SKEW_GRACE
}
fn d_transport_grace() -> u32 {
    DEFAULT_TRANSPORT_GRACE
}
fn d_channel_id() -> ChannelId {
    1
}
fn d_write_key() -> String {
    "FENCEWIRE-WRITE".into()
}
fn d_read_key() -> String {
    "FENCEWIRE-READ".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub sensor_id: u32,
    pub bearing: f64,
    #[serde(default)]
    pub mount_radius: f64,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Falls back to `comms.dropout_prob`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_prob: Option<f64>,
    /// Falls back to `comms.uplink_delay`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplink_delay: Option<f64>,
    #[serde(default)]
    pub suppress_redundant: bool,
}

impl SensorSpec {
    pub fn at(sensor_id: u32, bearing: f64) -> Self {
        SensorSpec {
            sensor_id,
            bearing,
            mount_radius: 0.0,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            dropout_prob: None,
            uplink_delay: None,
            suppress_redundant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub range: f64,
    #[serde(default)]
    pub bearing: f64,
    /// Radial speed until the first segment starts.
    #[serde(default)]
    pub radial_speed: f64,
    /// `[start_time, radial_speed]` pairs, sorted by start time.
    #[serde(default)]
    pub segments: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSpec {
    #[serde(default = "d_write")]
    pub write_interval: f64,
    #[serde(default = "d_poll")]
    pub poll_interval: f64,
    /// Defaults to three write intervals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_after: Option<f64>,
    #[serde(default = "d_min_write")]
    pub min_write_interval: f64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        TimingSpec {
            write_interval: d_write(),
            poll_interval: d_poll(),
            stale_after: None,
            min_write_interval: d_min_write(),
        }
    }
}

impl TimingSpec {
    pub fn stale_after(&self) -> f64 {
        self.stale_after
            .unwrap_or(DEFAULT_STALE_FACTOR * self.write_interval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CommsSpec {
    #[serde(default)]
    pub uplink_delay: f64,
    #[serde(default)]
    pub dropout_prob: f64,
    /// `[t_start, t_end)` windows during which sensor uplinks fail.
    #[serde(default)]
    pub blackouts: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorSpec {
    #[serde(default)]
    pub source: ReadSource,
    #[serde(default = "d_grace")]
    pub clock_skew_grace: f64,
    #[serde(default = "d_transport_grace")]
    pub transport_grace: u32,
}

impl Default for SupervisorSpec {
    fn default() -> Self {
        SupervisorSpec {
            source: ReadSource::Raw,
            clock_skew_grace: d_grace(),
            transport_grace: d_transport_grace(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default = "d_channel_id")]
    pub channel_id: ChannelId,
    #[serde(default = "d_write_key")]
    pub write_key: String,
    #[serde(default = "d_read_key")]
    pub read_key: String,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            channel_id: d_channel_id(),
            write_key: d_write_key(),
            read_key: d_read_key(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub duration: f64,
    #[serde(default = "d_tick")]
    pub tick: f64,
    #[serde(default)]
    pub seed: u64,
    pub sensors: Vec<SensorSpec>,
    pub object: ObjectSpec,
    #[serde(default)]
    pub timing: TimingSpec,
    #[serde(default)]
    pub zones: ZoneThresholds,
    #[serde(default)]
    pub robot: RobotConfig,
    #[serde(default)]
    pub comms: CommsSpec,
    #[serde(default)]
    pub supervisor: SupervisorSpec,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default = "d_quantum")]
    pub quantum: f64,
    #[serde(default = "d_max_range")]
    pub max_range: f64,
}

impl ScenarioSpec {
    /// One noiseless sensor, object closing radially from 5 m at 0.5 m/s.
    pub fn canonical() -> Self {
        ScenarioSpec {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: "canonical approach".into(),
            duration: 12.0,
            tick: DEFAULT_TICK,
            seed: 42,
            sensors: vec![SensorSpec {
                noise_sigma: 0.0,
                ..SensorSpec::at(1, 0.0)
            }],
            object: ObjectSpec {
                range: 5.0,
                bearing: 0.0,
                radial_speed: -0.5,
                segments: vec![],
            },
            timing: TimingSpec {
                write_interval: 1.0,
                poll_interval: 0.25,
                stale_after: Some(3.0),
                min_write_interval: 1.0,
            },
            zones: ZoneThresholds {
                d_stop: 0.5,
                d_slow: 2.0,
            },
            robot: RobotConfig {
                nominal_speed: 0.2,
                envelope_radius: 0.3,
                path: PathSpec::Sweep { length: 0.3 },
                decel_limit: None,
            },
            comms: CommsSpec::default(),
            supervisor: SupervisorSpec::default(),
            channel: ChannelSpec::default(),
            quantum: DEFAULT_QUANTUM,
            max_range: DEFAULT_MAX_RANGE,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        match value.get("schema_version") {
            None => {
                return Err(ScenarioError::Invalid(vec![FieldIssue {
                    path: "schema_version".into(),
                    message: "missing".into(),
                }]))
            }
            Some(v) => match v.as_u64() {
                Some(n) if n == SCENARIO_SCHEMA_VERSION as u64 => {}
                Some(n) => {
                    return Err(ScenarioError::Version {
                        found: n,
                        expected: SCENARIO_SCHEMA_VERSION,
                    })
                }
                None => {
                    return Err(ScenarioError::Invalid(vec![FieldIssue {
                        path: "schema_version".into(),
                        message: format!("expected an integer, got {v}"),
                    }]))
                }
            },
        }
        serde_json::from_value(value).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Every problem found, each tagged with its field path.
    pub fn issues(&self) -> Vec<FieldIssue> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| {
            out.push(FieldIssue {
                path: path.to_string(),
                message,
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();

        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            bad(
                "schema_version",
                format!("must be {SCENARIO_SCHEMA_VERSION}"),
            );
        }
        if !positive(self.duration) {
            bad("duration", format!("must be > 0, got {}", self.duration));
        }
        let tick_us = secs_to_micros(self.tick);
        let tick_ok = positive(self.tick) && tick_us > 0;
        if !tick_ok {
            bad(
                "tick",
                format!("must be >= 1 microsecond, got {}", self.tick),
            );
        }
        let aligned = |v: f64| tick_ok && secs_to_micros(v) % tick_us == 0;
        if positive(self.duration) && !aligned(self.duration) {
            bad(
                "duration",
                format!("must be a whole number of ticks ({})", self.tick),
            );
        }
        if !positive(self.quantum) {
            bad("quantum", format!("must be > 0, got {}", self.quantum));
        }
        if !positive(self.max_range) {
            bad("max_range", format!("must be > 0, got {}", self.max_range));
        }

        let t = &self.timing;
        if !positive(t.write_interval) {
            bad(
                "timing.write_interval",
                format!("must be > 0, got {}", t.write_interval),
            );
        } else if !aligned(t.write_interval) {
            bad(
                "timing.write_interval",
                format!("must be a multiple of tick ({})", self.tick),
            );
        }
        if !positive(t.poll_interval) {
            bad(
                "timing.poll_interval",
                format!("must be > 0, got {}", t.poll_interval),
            );
        } else if !aligned(t.poll_interval) {
            bad(
                "timing.poll_interval",
                format!("must be a multiple of tick ({})", self.tick),
            );
        }
        if StalenessPolicy::new(t.stale_after()).is_err() {
            bad(
                "timing.stale_after",
                format!("must be > 0, got {}", t.stale_after()),
            );
        }
        if !(t.min_write_interval >= 0.0 && t.min_write_interval.is_finite()) {
            bad(
                "timing.min_write_interval",
                format!("must be >= 0, got {}", t.min_write_interval),
            );
        }

        if let Err(e) = self.zones.validate(self.max_range) {
            bad("zones", e.to_string());
        }
        if let Err(e) = self.robot.validate(&self.zones) {
            bad("robot", e.to_string());
        }

        let n = self.sensors.len();
        if n == 0 {
            bad("sensors", "at least one sensor is required".into());
        } else if n > MAX_FENCE_SENSORS {
            bad(
                "sensors",
                format!("a channel carries at most {MAX_FENCE_SENSORS} sensors (slot {SAMPLE_TIME_SLOT} holds the sample time), got {n}"),
            );
        }
        if n > 0 && tick_ok && positive(t.write_interval) {
            let stagger = n as i64 * tick_us;
            if secs_to_micros(t.write_interval) % stagger != 0 {
                bad(
                    "timing.write_interval",
                    format!(
                        "must be a multiple of sensors x tick ({} s) so writes can be staggered",
                        micros_to_secs(stagger)
                    ),
                );
            }
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if self.sensors[..i].iter().any(|o| o.sensor_id == s.sensor_id) {
                bad(
                    &format!("sensors[{i}].sensor_id"),
                    format!("duplicate id {}", s.sensor_id),
                );
            }
            if !s.bearing.is_finite() {
                bad(&format!("sensors[{i}].bearing"), "must be finite".into());
            }
            if !(s.mount_radius >= 0.0 && s.mount_radius.is_finite()) {
                bad(&format!("sensors[{i}].mount_radius"), "must be >= 0".into());
            }
            if s.bearing.is_finite()
                && s.mount_radius >= 0.0
                && positive(self.quantum)
                && positive(self.max_range)
            {
                if let Err(e) = self.node_config(s).validate(t.min_write_interval, n) {
                    bad(&format!("sensors[{i}]"), e.to_string());
                }
            }
        }

        let o = &self.object;
        if !(o.range >= 0.0 && o.range.is_finite()) {
            bad("object.range", format!("must be >= 0, got {}", o.range));
        }
        if !o.bearing.is_finite() {
            bad("object.bearing", "must be finite".into());
        }
        if !o.radial_speed.is_finite() {
            bad("object.radial_speed", "must be finite".into());
        }
        for (i, (start, v)) in o.segments.iter().enumerate() {
            if !(*start >= 0.0 && start.is_finite()) || !v.is_finite() {
                bad(
                    &format!("object.segments[{i}]"),
                    "start must be >= 0 and speeds finite".into(),
                );
            }
            if i > 0 && *start < o.segments[i - 1].0 {
                bad(
                    &format!("object.segments[{i}]"),
                    "segments must be sorted by start_time".into(),
                );
            }
        }

        let c = &self.comms;
        if !(c.uplink_delay >= 0.0 && c.uplink_delay.is_finite()) {
            bad(
                "comms.uplink_delay",
                format!("must be >= 0, got {}", c.uplink_delay),
            );
        }
        if !(0.0..=1.0).contains(&c.dropout_prob) {
            bad(
                "comms.dropout_prob",
                format!("must be in [0, 1], got {}", c.dropout_prob),
            );
        }
        for (i, (a, b)) in c.blackouts.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                bad(
                    &format!("comms.blackouts[{i}]"),
                    "needs t_start < t_end".into(),
                );
            }
        }

        if self.supervisor.transport_grace == 0 {
            bad("supervisor.transport_grace", "must be >= 1".into());
        }
        if !(self.supervisor.clock_skew_grace >= 0.0) {
            bad("supervisor.clock_skew_grace", "must be >= 0".into());
        }
        if let ReadSource::Refined { window: 0 } = self.supervisor.source {
            bad("supervisor.source.refined.window", "must be >= 1".into());
        }
        if self.channel.write_key.is_empty() || self.channel.read_key.is_empty() {
            bad("channel", "keys must be non-empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(issues))
        }
    }

    fn node_config(&self, s: &SensorSpec) -> SensorNodeConfig {
        SensorNodeConfig {
            placement: SensorPlacement::new(s.sensor_id, s.bearing, s.mount_radius),
            write_interval: self.timing.write_interval,
            noise_sigma: s.noise_sigma,
            dropout_prob: s.dropout_prob.unwrap_or(self.comms.dropout_prob),
            uplink_delay: s.uplink_delay.unwrap_or(self.comms.uplink_delay),
            quantum: self.quantum,
            max_range: self.max_range,
            suppress_redundant: s.suppress_redundant,
        }
    }

    pub fn fence(&self) -> Vec<SensorPlacement> {
        self.sensors
            .iter()
            .map(|s| SensorPlacement::new(s.sensor_id, s.bearing, s.mount_radius))
            .collect()
    }
}

/// Closed-form object motion under piecewise-constant radial speed, with
/// the range held at zero once reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrajectory {
    range: f64,
    bearing: f64,
    speeds: Vec<(i64, f64)>,
}

impl ObjectTrajectory {
    pub fn new(spec: &ObjectSpec) -> Self {
        let mut speeds = vec![(0, spec.radial_speed)];
        speeds.extend(spec.segments.iter().map(|(t, v)| (secs_to_micros(*t), *v)));
        ObjectTrajectory {
            range: spec.range,
            bearing: spec.bearing,
            speeds,
        }
    }

    /// State `t_us` microseconds after the run origin.
    pub fn at(&self, t_us: i64) -> ObjectState {
        let mut range = self.range;
        let mut speed = self.speeds[0].1;
        let mut from = 0i64;
        for &(start, v) in &self.speeds[1..] {
            if start > t_us {
                break;
            }
            if start > from {
                range = (range + speed * micros_to_secs(start - from)).max(0.0);
                from = start;
            }
            speed = v;
        }
        if t_us > from {
            range = (range + speed * micros_to_secs(t_us - from)).max(0.0);
        }
        ObjectState {
            range,
            bearing: self.bearing,
            radial_speed: speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSensor {
    pub config: SensorNodeConfig,
    pub slot: FieldSlot,
    /// First sampling instant; later ones follow every write interval.
    pub offset_us: i64,
    pub uplink_delay_us: i64,
}

/// A validated scenario resolved onto the integer tick grid.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub spec: ScenarioSpec,
    pub tick_us: i64,
    pub rows: usize,
    pub duration_us: i64,
    pub write_us: i64,
    pub poll_us: i64,
    /// Ascending sensor id.
    pub sensors: Vec<PlannedSensor>,
    pub trajectory: ObjectTrajectory,
    pub blackouts_us: Vec<(i64, i64)>,
}

impl RunPlan {
    pub fn new(spec: &ScenarioSpec) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let tick_us = secs_to_micros(spec.tick);
        let duration_us = secs_to_micros(spec.duration);
        let write_us = secs_to_micros(spec.timing.write_interval);
        let n = spec.sensors.len() as i64;
        let by_id: Vec<_> = slot_assignment(&spec.fence());
        let sensors = by_id
            .iter()
            .enumerate()
            .map(|(k, (p, slot))| {
                let s = spec
                    .sensors
                    .iter()
                    .find(|s| s.sensor_id == p.sensor_id)
                    .expect("placement from spec");
                let config = spec.node_config(s);
                let delay_us = secs_to_micros(config.uplink_delay);
                PlannedSensor {
                    uplink_delay_us: delay_us,
                    config,
                    slot: *slot,
                    offset_us: k as i64 * write_us / n,
                }
            })
            .collect();
        Ok(RunPlan {
            spec: spec.clone(),
            tick_us,
            rows: (duration_us / tick_us) as usize,
            duration_us,
            write_us,
            poll_us: secs_to_micros(spec.timing.poll_interval),
            sensors,
            trajectory: ObjectTrajectory::new(&spec.object),
            blackouts_us: spec
                .comms
                .blackouts
                .iter()
                .map(|(a, b)| (secs_to_micros(*a), secs_to_micros(*b)))
                .collect(),
        })
    }

    pub fn tick_secs(&self) -> f64 {
        micros_to_secs(self.tick_us)
    }

    pub fn row_time(&self, k: usize) -> f64 {
        micros_to_secs(k as i64 * self.tick_us)
    }

    pub fn sample_due(&self, sensor: usize, t_us: i64) -> bool {
        let off = self.sensors[sensor].offset_us;
        t_us >= off && (t_us - off) % self.write_us == 0
    }

    /// Delivery instant for a sample taken at `t_us`, rounded up to a tick.
    pub fn delivery_due(&self, sensor: usize, t_us: i64) -> i64 {
        let d = self.sensors[sensor].uplink_delay_us;
        t_us + (d + self.tick_us - 1) / self.tick_us * self.tick_us
    }

    pub fn in_blackout(&self, t_us: i64) -> bool {
        self.blackouts_us
            .iter()
            .any(|&(a, b)| a <= t_us && t_us < b)
    }

    pub fn access(&self) -> ChannelAccess {
        let c = &self.spec.channel;
        ChannelAccess::new(c.channel_id, &c.write_key, &c.read_key)
    }

    pub fn channel_config(&self) -> ChannelConfig {
        let c = &self.spec.channel;
        let mut cfg = ChannelConfig::new(c.channel_id, &c.write_key, &c.read_key)
            .with_min_write_interval(self.spec.timing.min_write_interval);
        cfg.name = if self.spec.name.is_empty() {
            "fencewire".into()
        } else {
            self.spec.name.clone()
        };
        for s in &self.sensors {
            cfg.field_names
                .insert(s.slot, format!("sensor {}", s.config.placement.sensor_id));
        }
        cfg.field_names
            .insert(sample_time_slot(), "sample time".into());
        cfg
    }

    pub fn supervisor_config(&self, time_origin: Timestamp) -> SupervisorConfig {
        let s = &self.spec;
        SupervisorConfig {
            poll_interval: s.timing.poll_interval,
            staleness: StalenessPolicy {
                stale_after: s.timing.stale_after(),
            },
            zones: s.zones,
            fence: s.fence(),
            quantum: s.quantum,
            max_range: s.max_range,
            clock_skew_grace: s.supervisor.clock_skew_grace,
            transport_grace: s.supervisor.transport_grace,
            time_origin,
            source: s.supervisor.source,
        }
    }

    pub fn sensor_ids(&self) -> Vec<u32> {
        self.sensors
            .iter()
            .map(|s| s.config.placement.sensor_id)
            .collect()
    }
}
