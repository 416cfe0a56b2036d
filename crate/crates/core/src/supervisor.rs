//! The polling supervisor.
//!
//! Every poll the supervisor fetches the newest channel entry, merges the
//! per-sensor readings it carries into a held table, fuses the fence, and
//! maps the nearest distance onto a mode and speed override. Anything that
//! prevents a trustworthy picture (no data, stale data, transport failure,
//! a silent fence sensor) yields `FAULT_STOP` with override 0; leaving
//! `FAULT_STOP` takes an entry newer than the one current at the fault.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ciot::{ChannelClient, ChannelEntry, CiotError, EntryId, FieldSlot};
use crate::safety::{
    classify_zone, fuse, is_quantized, is_stale, quantize_range, speed_override, RangeReading,
    SensorId, SensorPlacement, StalenessPolicy, Zone, ZoneThresholds,
};
use crate::sensor::{encode_reading, OUT_OF_RANGE_WIRE};
use crate::time::{secs_to_micros, Clock, Timestamp};

/// Slot carrying the precise sample time (seconds since the run origin).
pub const SAMPLE_TIME_SLOT: u8 = 8;
/// Sensor slots are 1..=7; slot 8 is reserved for the sample time.
pub const MAX_FENCE_SENSORS: usize = 7;
pub const DEFAULT_POLL_INTERVAL: f64 = 0.25;
pub const DEFAULT_CLOCK_SKEW_GRACE: f64 = 0.5;
pub const DEFAULT_TRANSPORT_GRACE: u32 = 1;

pub fn sample_time_slot() -> FieldSlot {
    FieldSlot::new(SAMPLE_TIME_SLOT).expect("constant slot")
}

/// Field slot per sensor: ascending sensor id takes slots 1, 2, ...
pub fn slot_assignment(fence: &[SensorPlacement]) -> Vec<(SensorPlacement, FieldSlot)> {
    let mut sorted = fence.to_vec();
    sorted.sort_by_key(|p| p.sensor_id);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            (
                p,
                FieldSlot::new(i as u8 + 1).expect("fence size validated"),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisorError {
    #[error("invalid supervisor configuration: {0}")]
    Config(String),
    #[error("entry {entry_id} has no recognized sensor slot")]
    Decode { entry_id: EntryId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Clear,
    Slow,
    Stop,
    FaultStop,
}

impl Mode {
    pub fn from_zone(zone: Zone) -> Self {
        match zone {
            Zone::Clear => Mode::Clear,
            Zone::Slow => Mode::Slow,
            Zone::Stop => Mode::Stop,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Clear => "CLEAR",
            Mode::Slow => "SLOW",
            Mode::Stop => "STOP",
            Mode::FaultStop => "FAULT_STOP",
        }
    }

    /// Whether this mode forces a standstill.
    pub fn is_halt(self) -> bool {
        matches!(self, Mode::Stop | Mode::FaultStop)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CLEAR" => Ok(Mode::Clear),
            "SLOW" => Ok(Mode::Slow),
            "STOP" => Ok(Mode::Stop),
            "FAULT_STOP" => Ok(Mode::FaultStop),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Why the supervisor is in `FAULT_STOP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCause {
    NoData,
    Stale,
    ClockSkew,
    Transport,
    Protocol,
    Decode,
    FenceIncomplete,
    AwaitingFreshEntry,
}

/// Which channel view the supervisor acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReadSource {
    #[default]
    Raw,
    /// Broker-side moving average over the last `window` values per slot.
    Refined { window: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorConfig {
    /// Seconds.
    pub poll_interval: f64,
    pub staleness: StalenessPolicy,
    pub zones: ZoneThresholds,
    pub fence: Vec<SensorPlacement>,
    pub quantum: f64,
    pub max_range: f64,
    /// Seconds an entry may appear to be from the future before it is
    /// treated as stale.
    pub clock_skew_grace: f64,
    /// Consecutive failed fetches tolerated before faulting.
    pub transport_grace: u32,
    /// Origin of the sample-time field.
    pub time_origin: Timestamp,
    pub source: ReadSource,
}

impl SupervisorConfig {
    pub fn new(fence: Vec<SensorPlacement>, zones: ZoneThresholds, stale_after: f64) -> Self {
        SupervisorConfig {
            poll_interval: DEFAULT_POLL_INTERVAL,
            staleness: StalenessPolicy { stale_after },
            zones,
            fence,
            quantum: crate::safety::DEFAULT_QUANTUM,
            max_range: crate::safety::DEFAULT_MAX_RANGE,
            clock_skew_grace: DEFAULT_CLOCK_SKEW_GRACE,
            transport_grace: DEFAULT_TRANSPORT_GRACE,
            time_origin: Timestamp::SIM_EPOCH,
            source: ReadSource::Raw,
        }
    }

    pub fn validate(&self) -> Result<(), SupervisorError> {
        let err = |m: String| Err(SupervisorError::Config(m));
        if !(self.poll_interval > 0.0) {
            return err(format!(
                "poll_interval must be > 0, got {}",
                self.poll_interval
            ));
        }
        StalenessPolicy::new(self.staleness.stale_after)
            .map_err(|e| SupervisorError::Config(e.to_string()))?;
        self.zones
            .validate(self.max_range)
            .map_err(|e| SupervisorError::Config(e.to_string()))?;
        if self.fence.is_empty() {
            return err("fence must contain at least one sensor".into());
        }
        if self.fence.len() > MAX_FENCE_SENSORS {
            return err(format!(
                "a channel carries at most {MAX_FENCE_SENSORS} sensors, got {}",
                self.fence.len()
            ));
        }
        let mut ids: Vec<_> = self.fence.iter().map(|p| p.sensor_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return err("sensor ids must be unique".into());
        }
        if !(self.clock_skew_grace >= 0.0) {
            return err("clock_skew_grace must be >= 0".into());
        }
        if self.transport_grace == 0 {
            return err("transport_grace must be >= 1".into());
        }
        if let ReadSource::Refined { window: 0 } = self.source {
            return err("refined window must be >= 1".into());
        }
        Ok(())
    }

    pub fn poll_interval_micros(&self) -> i64 {
        secs_to_micros(self.poll_interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldReading {
    pub reading: RangeReading,
    pub entry_id: EntryId,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorState {
    pub mode: Mode,
    pub current_override: f64,
    pub last_entry_id: Option<EntryId>,
    pub last_entry_created_at: Option<Timestamp>,
    pub last_sample_time: Option<Timestamp>,
    pub last_bearing: Option<f64>,
    /// Newest reading per fence sensor.
    pub held: BTreeMap<SensorId, HeldReading>,
    /// While faulted: the entry id that was current when the fault latched.
    pub fault_latch: Option<Option<EntryId>>,
    pub fault: Option<FaultCause>,
    pub consecutive_fetch_failures: u32,
    pub decode_warnings: u64,
}

impl Default for SupervisorState {
    fn default() -> Self {
        Self::initial()
    }
}

impl SupervisorState {
    /// Starts halted until the first usable entry arrives.
    pub fn initial() -> Self {
        SupervisorState {
            mode: Mode::FaultStop,
            current_override: 0.0,
            last_entry_id: None,
            last_entry_created_at: None,
            last_sample_time: None,
            last_bearing: None,
            held: BTreeMap::new(),
            fault_latch: Some(None),
            fault: Some(FaultCause::NoData),
            consecutive_fetch_failures: 0,
            decode_warnings: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisorCommand {
    pub speed_override: f64,
    pub mode: Mode,
    pub issued_at: Timestamp,
    pub cause_entry_id: Option<EntryId>,
    /// Precise sample instant of the newest entry, when known.
    pub cause_sample_time: Option<Timestamp>,
    /// First command acting on a newly observed entry.
    pub fresh: bool,
    pub min_distance: Option<RangeReading>,
    pub approach_bearing: Option<f64>,
    pub fault: Option<FaultCause>,
}

impl SupervisorCommand {
    /// Sense-to-command latency in seconds for fresh commands.
    pub fn latency(&self) -> Option<f64> {
        match (self.fresh, self.cause_sample_time) {
            (true, Some(t)) => Some(self.issued_at.secs_since(t)),
            _ => None,
        }
    }
}

/// Readings recovered from one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEntry {
    pub readings: Vec<(SensorPlacement, RangeReading)>,
    pub sample_time: Option<Timestamp>,
    pub warnings: u32,
}

fn decode_value(raw: &str, quantum: f64, max_range: f64) -> Option<RangeReading> {
    let raw = raw.trim();
    if raw == OUT_OF_RANGE_WIRE {
        return Some(RangeReading::OutOfRange);
    }
    let v: f64 = raw.parse().ok()?;
    if !v.is_finite() || v < 0.0 || v > max_range || !is_quantized(v, quantum) {
        return None;
    }
    // Re-quantizing snaps the parsed decimal onto the exact grid value.
    quantize_range(v, quantum, max_range).ok()
}

/// Maps an entry's field slots back onto fence sensors. Undecodable values
/// become `OutOfRange` and are counted as warnings.
pub fn decode_entry(
    entry: &ChannelEntry,
    fence: &[SensorPlacement],
    quantum: f64,
    max_range: f64,
    time_origin: Timestamp,
) -> Result<DecodedEntry, SupervisorError> {
    let mut readings = Vec::new();
    let mut warnings = 0;
    for (placement, slot) in slot_assignment(fence) {
        let Some(raw) = entry.field(slot) else {
            continue;
        };
        let reading = decode_value(raw, quantum, max_range).unwrap_or_else(|| {
            log::warn!(
                "entry {}: {slot}={raw:?} is not a valid reading for sensor {}",
                entry.entry_id,
                placement.sensor_id
            );
            warnings += 1;
            RangeReading::OutOfRange
        });
        readings.push((placement, reading));
    }
    if readings.is_empty() {
        return Err(SupervisorError::Decode {
            entry_id: entry.entry_id,
        });
    }
    let sample_time = match entry.field(sample_time_slot()) {
        None => None,
        Some(raw) => match raw.trim().parse::<f64>() {
            Ok(secs) if secs.is_finite() => Some(time_origin.add_secs(secs)),
            _ => {
                warnings += 1;
                None
            }
        },
    };
    Ok(DecodedEntry {
        readings,
        sample_time,
        warnings,
    })
}

/// Substitutes the broker's moving averages into the latest entry,
/// re-quantized onto the sensor grid.
fn refined_entry(
    view: crate::ciot::RefinedView,
    config: &SupervisorConfig,
) -> Option<ChannelEntry> {
    let mut entry = view.latest?;
    for (_, slot) in slot_assignment(&config.fence) {
        if let Some(mean) = view.means.get(&slot) {
            let value = if *mean < 0.0 {
                OUT_OF_RANGE_WIRE.to_string()
            } else {
                quantize_range(*mean, config.quantum, config.max_range)
                    .map(|r| encode_reading(r, config.quantum))
                    .unwrap_or_else(|_| OUT_OF_RANGE_WIRE.to_string())
            };
            entry.fields.insert(slot, value);
        }
    }
    Some(entry)
}

/// `Some(cause)` when a sample created at `created_at` cannot be trusted at `now`.
fn staleness_fault(
    created_at: Timestamp,
    now: Timestamp,
    config: &SupervisorConfig,
) -> Option<FaultCause> {
    let age = now.micros_since(created_at);
    if age < -secs_to_micros(config.clock_skew_grace) {
        return Some(FaultCause::ClockSkew);
    }
    let sample_time = created_at.min(now);
    match is_stale(sample_time, now, &config.staleness) {
        Ok(false) => None,
        _ => Some(FaultCause::Stale),
    }
}

fn fault_command(
    mut s: SupervisorState,
    cause: FaultCause,
    now: Timestamp,
) -> (SupervisorState, SupervisorCommand) {
    if s.fault_latch.is_none() {
        s.fault_latch = Some(s.last_entry_id);
    }
    s.mode = Mode::FaultStop;
    s.current_override = 0.0;
    s.fault = Some(cause);
    let cmd = SupervisorCommand {
        speed_override: 0.0,
        mode: Mode::FaultStop,
        issued_at: now,
        cause_entry_id: s.last_entry_id,
        cause_sample_time: s.last_sample_time,
        fresh: false,
        min_distance: None,
        approach_bearing: s.last_bearing,
        fault: Some(cause),
    };
    (s, cmd)
}

/// One supervisory cycle.
pub fn poll_once<C: ChannelClient + ?Sized>(
    state: &SupervisorState,
    config: &SupervisorConfig,
    client: &mut C,
    now: Timestamp,
) -> (SupervisorState, SupervisorCommand) {
    let mut s = state.clone();

    let fetched = match config.source {
        ReadSource::Raw => client.fetch_last(),
        ReadSource::Refined { window } => client
            .fetch_refined(window)
            .map(|view| refined_entry(view, config)),
    };

    let mut new_entry = false;
    match fetched {
        Err(e) => {
            s.consecutive_fetch_failures = s.consecutive_fetch_failures.saturating_add(1);
            let cause = if e.is_transport() {
                FaultCause::Transport
            } else {
                FaultCause::Protocol
            };
            if !e.is_transport() || s.consecutive_fetch_failures >= config.transport_grace {
                log_fetch_error(&e);
                return fault_command(s, cause, now);
            }
            // Below the grace count: keep judging the data already held.
        }
        Ok(None) => {
            s.consecutive_fetch_failures = 0;
            return fault_command(s, FaultCause::NoData, now);
        }
        Ok(Some(entry)) => {
            s.consecutive_fetch_failures = 0;
            if Some(entry.entry_id) != s.last_entry_id {
                new_entry = true;
                s.last_entry_id = Some(entry.entry_id);
                s.last_entry_created_at = Some(entry.created_at);
                match decode_entry(
                    &entry,
                    &config.fence,
                    config.quantum,
                    config.max_range,
                    config.time_origin,
                ) {
                    Ok(decoded) => {
                        s.decode_warnings += decoded.warnings as u64;
                        s.last_sample_time = decoded.sample_time;
                        for (p, reading) in decoded.readings {
                            s.held.insert(
                                p.sensor_id,
                                HeldReading {
                                    reading,
                                    entry_id: entry.entry_id,
                                    created_at: entry.created_at,
                                },
                            );
                        }
                    }
                    Err(e) => {
                        log::warn!("{e}");
                        s.decode_warnings += 1;
                        s.last_sample_time = None;
                        return fault_command(s, FaultCause::Decode, now);
                    }
                }
            }
        }
    }

    let Some(created_at) = s.last_entry_created_at else {
        return fault_command(s, FaultCause::NoData, now);
    };
    if let Some(cause) = staleness_fault(created_at, now, config) {
        return fault_command(s, cause, now);
    }
    let mut readings = Vec::with_capacity(config.fence.len());
    for p in &config.fence {
        match s.held.get(&p.sensor_id) {
            Some(h) if staleness_fault(h.created_at, now, config).is_none() => {
                readings.push((*p, h.reading))
            }
            _ => return fault_command(s, FaultCause::FenceIncomplete, now),
        }
    }
    if let Some(latch) = s.fault_latch {
        if s.last_entry_id <= latch {
            return fault_command(s, FaultCause::AwaitingFreshEntry, now);
        }
        s.fault_latch = None;
    }

    let fused = fuse(&readings, config.max_range).expect("fence validated non-empty and unique");
    let zone = classify_zone(fused.min_distance, &config.zones);
    let mode = Mode::from_zone(zone);
    let speed = speed_override(fused.min_distance, &config.zones);
    s.mode = mode;
    s.current_override = speed;
    s.fault = None;
    if fused.approach_bearing.is_some() {
        s.last_bearing = fused.approach_bearing;
    }
    let cmd = SupervisorCommand {
        speed_override: speed,
        mode,
        issued_at: now,
        cause_entry_id: s.last_entry_id,
        cause_sample_time: s.last_sample_time,
        fresh: new_entry,
        min_distance: Some(fused.min_distance),
        approach_bearing: fused.approach_bearing,
        fault: None,
    };
    (s, cmd)
}

fn log_fetch_error(e: &CiotError) {
    log::warn!("supervisor fetch failed: {e}");
}

/// Paces the command stream.
pub trait Ticker {
    /// Blocks (if needed) until the next poll instant and returns it.
    fn next_tick(&mut self) -> Timestamp;
}

/// Exact simulated ticks: `start`, `start + interval`, ...
#[derive(Debug, Clone)]
pub struct LockstepTicker {
    start: Timestamp,
    interval_us: i64,
    k: i64,
}

impl LockstepTicker {
    pub fn new(start: Timestamp, interval_secs: f64) -> Self {
        LockstepTicker {
            start,
            interval_us: secs_to_micros(interval_secs),
            k: 0,
        }
    }
}

impl Ticker for LockstepTicker {
    fn next_tick(&mut self) -> Timestamp {
        let t = self.start.add_micros(self.k * self.interval_us);
        self.k += 1;
        t
    }
}

/// Wall-clock ticks on absolute deadlines so jitter does not accumulate.
pub struct RealtimeTicker {
    clock: Arc<dyn Clock>,
    started: Instant,
    interval: Duration,
    k: u32,
}

impl RealtimeTicker {
    pub fn new(clock: Arc<dyn Clock>, started: Instant, interval_secs: f64) -> Self {
        RealtimeTicker {
            clock,
            started,
            interval: Duration::from_secs_f64(interval_secs),
            k: 0,
        }
    }
}

impl Ticker for RealtimeTicker {
    fn next_tick(&mut self) -> Timestamp {
        let deadline = self.started + self.interval * self.k;
        self.k += 1;
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
        self.clock.now()
    }
}

/// Unbounded sequence of commands, one per tick. Runtime faults surface as
/// `FAULT_STOP` commands, never as gaps.
pub struct CommandStream<C, T> {
    config: SupervisorConfig,
    client: C,
    ticker: T,
    state: SupervisorState,
}

impl<C: ChannelClient, T: Ticker> CommandStream<C, T> {
    pub fn new(config: SupervisorConfig, client: C, ticker: T) -> Result<Self, SupervisorError> {
        config.validate()?;
        Ok(CommandStream {
            config,
            client,
            ticker,
            state: SupervisorState::initial(),
        })
    }

    pub fn state(&self) -> &SupervisorState {
        &self.state
    }
}

impl<C: ChannelClient, T: Ticker> Iterator for CommandStream<C, T> {
    type Item = SupervisorCommand;

    fn next(&mut self) -> Option<SupervisorCommand> {
        let now = self.ticker.next_tick();
        let (state, cmd) = poll_once(&self.state, &self.config, &mut self.client, now);
        self.state = state;
        Some(cmd)
    }
}

/// Capacity-one, newest-wins handoff from the supervisor to the robot.
#[derive(Debug, Clone, Default)]
pub struct CommandSlot {
    inner: Arc<Mutex<Option<SupervisorCommand>>>,
}

impl CommandSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces whatever command is waiting.
    pub fn offer(&self, cmd: SupervisorCommand) {
        *self.inner.lock().expect("command slot poisoned") = Some(cmd);
    }

    /// The most recent command, left in place.
    pub fn latest(&self) -> Option<SupervisorCommand> {
        self.inner.lock().expect("command slot poisoned").clone()
    }

    pub fn take(&self) -> Option<SupervisorCommand> {
        self.inner.lock().expect("command slot poisoned").take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciot::{
        Broker, ChannelAccess, ChannelConfig, FieldSet, LocalClient, RefinedView, WriteOutcome,
    };
    use crate::time::SimClock;
    use proptest::prelude::*;

    const Z: ZoneThresholds = ZoneThresholds {
        d_stop: 0.5,
        d_slow: 2.0,
    };

    fn slot(n: u8) -> FieldSlot {
        FieldSlot::new(n).unwrap()
    }

    fn cfg(n_sensors: u32) -> SupervisorConfig {
        let fence = (1..=n_sensors)
            .map(|i| SensorPlacement::new(i, (i - 1) as f64 * 90.0, 0.0))
            .collect();
        SupervisorConfig::new(fence, Z, 3.0)
    }

    struct Rig {
        broker: Arc<Broker>,
        clock: Arc<SimClock>,
        client: LocalClient,
    }

    impl Rig {
        fn new() -> Self {
            let broker = Arc::new(
                Broker::new(vec![
                    ChannelConfig::new(1, "W", "R").with_min_write_interval(0.0)
                ])
                .unwrap(),
            );
            let clock = Arc::new(SimClock::new(Timestamp::SIM_EPOCH));
            let client = LocalClient::new(
                broker.clone(),
                ChannelAccess::new(1, "W", "R"),
                clock.clone(),
            );
            Rig {
                broker,
                clock,
                client,
            }
        }

        fn at(&self, secs: f64) -> Timestamp {
            Timestamp::SIM_EPOCH.add_secs(secs)
        }

        fn write(&self, secs: f64, values: &[(u8, &str)]) -> u64 {
            let fields: FieldSet = values
                .iter()
                .map(|(s, v)| (slot(*s), v.to_string()))
                .collect();
            match self.broker.write("W", &fields, self.at(secs)).unwrap() {
                WriteOutcome::Accepted(id) => id,
                WriteOutcome::Rejected => panic!("rejected"),
            }
        }

        fn poll(
            &mut self,
            s: &SupervisorState,
            c: &SupervisorConfig,
            secs: f64,
        ) -> (SupervisorState, SupervisorCommand) {
            self.clock.set(self.at(secs));
            let now = self.at(secs);
            poll_once(s, c, &mut self.client, now)
        }
    }

    #[test]
    fn poll_examples() {
        let c = cfg(1);
        let mut rig = Rig::new();
        rig.write(0.0, &[(1, "0.40"), (8, "0.000000")]);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 0.0);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::Stop, 0.0));

        let mut rig = Rig::new();
        rig.write(0.0, &[(1, "-1")]);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 0.1);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::Clear, 1.0));

        let mut rig = Rig::new();
        rig.write(0.0, &[(1, "1.25")]);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 5.0);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::FaultStop, 0.0));
        assert_eq!(cmd.fault, Some(FaultCause::Stale));
    }

    #[test]
    fn empty_channel_faults() {
        let mut rig = Rig::new();
        let (s, cmd) = rig.poll(&SupervisorState::initial(), &cfg(1), 0.0);
        assert_eq!(cmd.mode, Mode::FaultStop);
        assert_eq!(cmd.fault, Some(FaultCause::NoData));
        assert_eq!(s.current_override, 0.0);
    }

    #[test]
    fn decode_examples() {
        let fence = vec![SensorPlacement::new(1, 0.0, 0.0)];
        let entry = |v: &str| ChannelEntry {
            entry_id: 1,
            created_at: Timestamp::SIM_EPOCH,
            fields: [(slot(1), v.to_string())].into_iter().collect(),
        };
        let d = decode_entry(&entry("1.23"), &fence, 0.01, 5.0, Timestamp::SIM_EPOCH).unwrap();
        assert_eq!(d.readings[0].1, RangeReading::InRange(1.23));
        assert_eq!(d.warnings, 0);
        let d = decode_entry(&entry("-1"), &fence, 0.01, 5.0, Timestamp::SIM_EPOCH).unwrap();
        assert_eq!(d.readings[0].1, RangeReading::OutOfRange);
        let d = decode_entry(&entry("abc"), &fence, 0.01, 5.0, Timestamp::SIM_EPOCH).unwrap();
        assert_eq!(d.readings[0].1, RangeReading::OutOfRange);
        assert_eq!(d.warnings, 1);
        // Off-grid and beyond-range values are also rejected.
        for bad in ["1.234", "7.00", "-0.5", "NaN"] {
            let d = decode_entry(&entry(bad), &fence, 0.01, 5.0, Timestamp::SIM_EPOCH).unwrap();
            assert_eq!(d.readings[0].1, RangeReading::OutOfRange, "{bad}");
            assert_eq!(d.warnings, 1);
        }
    }

    #[test]
    fn decode_requires_a_sensor_slot() {
        let fence = vec![SensorPlacement::new(1, 0.0, 0.0)];
        let entry = ChannelEntry {
            entry_id: 4,
            created_at: Timestamp::SIM_EPOCH,
            fields: [(slot(8), "1.0".to_string())].into_iter().collect(),
        };
        assert_eq!(
            decode_entry(&entry, &fence, 0.01, 5.0, Timestamp::SIM_EPOCH),
            Err(SupervisorError::Decode { entry_id: 4 })
        );
    }

    #[test]
    fn slots_follow_ascending_sensor_id() {
        let fence = vec![
            SensorPlacement::new(9, 0.0, 0.0),
            SensorPlacement::new(2, 90.0, 0.0),
        ];
        let m = slot_assignment(&fence);
        assert_eq!(m[0].0.sensor_id, 2);
        assert_eq!(m[0].1, slot(1));
        assert_eq!(m[1].0.sensor_id, 9);
        assert_eq!(m[1].1, slot(2));
    }

    #[test]
    fn precise_sample_time_yields_latency() {
        let mut rig = Rig::new();
        rig.write(2.0, &[(1, "1.25"), (8, "2.000000")]);
        let (s, cmd) = rig.poll(&SupervisorState::initial(), &cfg(1), 2.25);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::Slow, 0.5));
        assert!(cmd.fresh);
        assert!((cmd.latency().unwrap() - 0.25).abs() < 1e-9);
        // Same entry again: not fresh, no latency sample.
        let (_, cmd) = rig.poll(&s, &cfg(1), 2.5);
        assert!(!cmd.fresh);
        assert_eq!(cmd.latency(), None);
    }

    #[test]
    fn unchanged_entry_goes_stale() {
        let mut rig = Rig::new();
        let c = cfg(1);
        rig.write(0.0, &[(1, "3.00")]);
        let (s, cmd) = rig.poll(&SupervisorState::initial(), &c, 0.0);
        assert_eq!(cmd.mode, Mode::Clear);
        let (s, cmd) = rig.poll(&s, &c, 3.0);
        assert_eq!(cmd.mode, Mode::Clear);
        let (s, cmd) = rig.poll(&s, &c, 3.25);
        assert_eq!(cmd.mode, Mode::FaultStop);
        // The old entry recovering its "freshness" is impossible; a new one is needed.
        rig.write(3.5, &[(1, "3.00")]);
        let (_, cmd) = rig.poll(&s, &c, 3.5);
        assert_eq!(cmd.mode, Mode::Clear);
    }

    #[test]
    fn clock_skew_within_grace_is_tolerated() {
        let mut rig = Rig::new();
        let c = cfg(1);
        rig.write(10.0, &[(1, "3.00")]);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 9.6);
        assert_eq!(cmd.mode, Mode::Clear);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 9.4);
        assert_eq!(cmd.fault, Some(FaultCause::ClockSkew));
    }

    /// Client whose fetches can be switched to fail.
    struct Flaky<C> {
        inner: C,
        failing: bool,
    }

    impl<C: ChannelClient> ChannelClient for Flaky<C> {
        fn publish(&mut self, fields: &FieldSet) -> Result<WriteOutcome, CiotError> {
            self.inner.publish(fields)
        }
        fn fetch_last(&mut self) -> Result<Option<ChannelEntry>, CiotError> {
            if self.failing {
                Err(CiotError::Transport {
                    endpoint: "test".into(),
                    message: "down".into(),
                    retryable: true,
                    retry_after: Some(1.0),
                })
            } else {
                self.inner.fetch_last()
            }
        }
        fn fetch_feed(&mut self, results: usize) -> Result<Vec<ChannelEntry>, CiotError> {
            self.inner.fetch_feed(results)
        }
        fn fetch_refined(&mut self, window: usize) -> Result<RefinedView, CiotError> {
            self.inner.fetch_refined(window)
        }
    }

    #[test]
    fn transport_failures_respect_grace() {
        let rig = Rig::new();
        rig.write(0.0, &[(1, "3.00")]);
        let now = rig.at(0.5);
        let mut flaky = Flaky {
            inner: rig.client,
            failing: false,
        };

        let mut c = cfg(1);
        let (s, _) = poll_once(&SupervisorState::initial(), &c, &mut flaky, now);
        flaky.failing = true;
        let (_, cmd) = poll_once(&s, &c, &mut flaky, now);
        assert_eq!(cmd.fault, Some(FaultCause::Transport));

        c.transport_grace = 2;
        let (s1, cmd) = poll_once(&s, &c, &mut flaky, now);
        assert_eq!(cmd.mode, Mode::Clear);
        let (_, cmd) = poll_once(&s1, &c, &mut flaky, now);
        assert_eq!(cmd.mode, Mode::FaultStop);
    }

    #[test]
    fn multi_sensor_readings_are_carried_between_entries() {
        let mut rig = Rig::new();
        let c = cfg(2);
        rig.write(0.0, &[(1, "3.00")]);
        let (s, cmd) = rig.poll(&SupervisorState::initial(), &c, 0.0);
        // Sensor 2 has not reported yet.
        assert_eq!(cmd.fault, Some(FaultCause::FenceIncomplete));
        rig.write(0.5, &[(2, "1.25")]);
        let (s, cmd) = rig.poll(&s, &c, 0.5);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::Slow, 0.5));
        let expected = 3.75f64.atan2(2.0).to_degrees();
        assert!((cmd.approach_bearing.unwrap() - expected).abs() < 1e-9);
        rig.write(1.0, &[(1, "0.30")]);
        let (s, cmd) = rig.poll(&s, &c, 1.0);
        assert_eq!(cmd.mode, Mode::Stop);
        // Sensor 1 keeps reporting, sensor 2 goes silent past stale_after.
        rig.write(4.2, &[(1, "3.00")]);
        let (_, cmd) = rig.poll(&s, &c, 4.2);
        assert_eq!(cmd.fault, Some(FaultCause::FenceIncomplete));
    }

    #[test]
    fn refined_source_uses_moving_average() {
        let mut rig = Rig::new();
        let mut c = cfg(1);
        c.source = ReadSource::Refined { window: 3 };
        rig.write(0.0, &[(1, "1.00"), (8, "0.0")]);
        rig.write(0.1, &[(1, "1.50"), (8, "0.1")]);
        rig.write(0.2, &[(1, "2.00"), (8, "0.2")]);
        let (_, cmd) = rig.poll(&SupervisorState::initial(), &c, 0.3);
        assert_eq!((cmd.mode, cmd.speed_override), (Mode::Slow, 2.0 / 3.0));
        assert_eq!(cmd.cause_entry_id, Some(3));
        assert_eq!(
            cmd.cause_sample_time,
            Some(Timestamp::SIM_EPOCH.add_secs(0.2))
        );
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1).validate().is_ok());
        assert!(cfg(8).validate().is_err());
        let mut c = cfg(1);
        c.poll_interval = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(1);
        c.fence.clear();
        assert!(c.validate().is_err());
        let mut c = cfg(2);
        c.fence[1].sensor_id = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn command_stream_on_quiescent_channel() {
        let rig = Rig::new();
        let ticker = LockstepTicker::new(Timestamp::SIM_EPOCH, 0.25);
        let stream = CommandStream::new(cfg(1), rig.client, ticker).unwrap();
        let cmds: Vec<_> = stream.take(4).collect();
        assert_eq!(cmds.len(), 4);
        assert!(cmds
            .iter()
            .all(|c| c.mode == Mode::FaultStop && c.speed_override == 0.0));
        assert_eq!(cmds[3].issued_at.secs_since(cmds[0].issued_at), 0.75);
    }

    #[test]
    fn command_stream_static_object_is_steady() {
        let rig = Rig::new();
        let c = cfg(1);
        // Fresh data every tick.
        let broker = rig.broker.clone();
        let ticker = LockstepTicker::new(Timestamp::SIM_EPOCH, 0.25);
        let mut stream = CommandStream::new(c, rig.client, ticker).unwrap();
        for k in 0..8 {
            let t = Timestamp::SIM_EPOCH.add_micros(k * 250_000);
            let fields: FieldSet = [(slot(1), "1.25".to_string())].into_iter().collect();
            broker.write("W", &fields, t).unwrap();
            let cmd = stream.next().unwrap();
            assert_eq!((cmd.mode, cmd.speed_override), (Mode::Slow, 0.5));
        }
    }

    #[test]
    fn command_slot_is_newest_wins() {
        let slot = CommandSlot::new();
        assert!(slot.latest().is_none());
        let mk = |o: f64| SupervisorCommand {
            speed_override: o,
            mode: Mode::Slow,
            issued_at: Timestamp::SIM_EPOCH,
            cause_entry_id: None,
            cause_sample_time: None,
            fresh: false,
            min_distance: None,
            approach_bearing: None,
            fault: None,
        };
        slot.offer(mk(0.1));
        slot.offer(mk(0.2));
        assert_eq!(slot.latest().unwrap().speed_override, 0.2);
        assert_eq!(slot.take().unwrap().speed_override, 0.2);
        assert!(slot.take().is_none());
    }

    #[derive(Debug, Clone)]
    enum Step {
        Write { dt_ms: u16, value: String },
        Poll { dt_ms: u16 },
    }

    fn step() -> impl Strategy<Value = Step> {
        let value = prop_oneof![
            Just("-1".to_string()),
            (0u32..=500).prop_map(|n| format!("{:.2}", n as f64 * 0.01)),
            "[ -~]{0,6}",
        ];
        prop_oneof![
            (0u16..2000, value).prop_map(|(dt_ms, value)| Step::Write { dt_ms, value }),
            (0u16..2000).prop_map(|dt_ms| Step::Poll { dt_ms }),
        ]
    }

    proptest! {
        #[test]
        fn state_machine_is_total_and_failsafe(steps in proptest::collection::vec(step(), 1..60)) {
            let mut rig = Rig::new();
            let c = cfg(1);
            let mut s = SupervisorState::initial();
            let mut t = 0.0;
            let mut newest: Option<Timestamp> = None;
            for st in steps {
                match st {
                    Step::Write { dt_ms, value } => {
                        t += dt_ms as f64 / 1000.0;
                        rig.write(t, &[(1, value.as_str())]);
                        newest = Some(rig.at(t).truncate_to_secs());
                    }
                    Step::Poll { dt_ms } => {
                        t += dt_ms as f64 / 1000.0;
                        let (ns, cmd) = rig.poll(&s, &c, t);
                        prop_assert!((0.0..=1.0).contains(&cmd.speed_override));
                        match cmd.mode {
                            Mode::Stop | Mode::FaultStop => prop_assert_eq!(cmd.speed_override, 0.0),
                            Mode::Clear => prop_assert_eq!(cmd.speed_override, 1.0),
                            Mode::Slow => {}
                        }
                        let stale = match newest {
                            None => true,
                            Some(created) => rig.at(t).micros_since(created) > 3_000_000,
                        };
                        if stale {
                            prop_assert_eq!(cmd.speed_override, 0.0);
                        }
                        s = ns;
                    }
                }
            }
        }

        #[test]
        fn overrides_are_monotone_in_distance(a in 0u32..=500, b in 0u32..=500) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut out = Vec::new();
            for n in [lo, hi] {
                let mut rig = Rig::new();
                rig.write(0.0, &[(1, &format!("{:.2}", n as f64 * 0.01))]);
                let (_, cmd) = rig.poll(&SupervisorState::initial(), &cfg(1), 0.1);
                out.push(cmd.speed_override);
            }
            prop_assert!(out[0] <= out[1]);
        }
    }
}
