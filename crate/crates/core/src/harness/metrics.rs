//! Per-tick trace rows and the summary derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ciot::{ChannelEntry, EntryId};
use crate::robot::{score_safety, RobotConfig, RobotState, SafetyOutcome};
use crate::safety::{RangeReading, ZoneThresholds};
use crate::sensor::{encode_reading, ObjectState};
use crate::supervisor::{decode_entry, Mode, SupervisorCommand};
use crate::time::Timestamp;

use super::scenario::RunPlan;

pub const RUN_SCHEMA_VERSION: u32 = 1;
/// First token of the metadata line heading every run.csv.
pub const RUN_HEADER_TAG: &str = "# fencewire-run";

/// Run-wide constants needed to interpret (and re-score) a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub tick: f64,
    pub duration: f64,
    pub rows: usize,
    pub quantum: f64,
    pub d_stop: f64,
    pub d_slow: f64,
    pub envelope_radius: f64,
    pub nominal_speed: f64,
    pub sensor_ids: Vec<u32>,
}

impl RunMeta {
    pub fn from_plan(plan: &RunPlan) -> Self {
        let s = &plan.spec;
        RunMeta {
            schema_version: RUN_SCHEMA_VERSION,
            tick: plan.tick_secs(),
            duration: s.duration,
            rows: plan.rows,
            quantum: s.quantum,
            d_stop: s.zones.d_stop,
            d_slow: s.zones.d_slow,
            envelope_radius: s.robot.envelope_radius,
            nominal_speed: s.robot.nominal_speed,
            sensor_ids: plan.sensor_ids(),
        }
    }

    pub fn header_line(&self) -> String {
        let ids: Vec<String> = self.sensor_ids.iter().map(u32::to_string).collect();
        format!(
            "{RUN_HEADER_TAG} schema_version={} tick={} duration={} rows={} quantum={} d_stop={} d_slow={} envelope_radius={} nominal_speed={} sensors={}",
            self.schema_version,
            self.tick,
            self.duration,
            self.rows,
            self.quantum,
            self.d_stop,
            self.d_slow,
            self.envelope_radius,
            self.nominal_speed,
            ids.join(",")
        )
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = vec!["t".into(), "true_range".into(), "bearing".into()];
        for id in &self.sensor_ids {
            cols.push(format!("s{id}_measured"));
            cols.push(format!("s{id}_outcome"));
        }
        cols.extend(
            ["entry_id", "mode", "override", "robot_speed", "latency_s"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols
    }

    pub fn zones(&self) -> ZoneThresholds {
        ZoneThresholds {
            d_stop: self.d_stop,
            d_slow: self.d_slow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorCell {
    /// Reading taken at this tick.
    pub measured: Option<RangeReading>,
    /// Publish outcome resolved at this tick, as its one-letter code.
    pub outcome: Option<char>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRow {
    pub t: f64,
    pub true_range: f64,
    pub bearing: f64,
    pub sensors: Vec<SensorCell>,
    pub entry_id: Option<EntryId>,
    pub mode: Mode,
    pub speed_override: f64,
    pub robot_speed: f64,
    /// Set on the tick where a command caused by a fresh entry took effect.
    pub latency_s: Option<f64>,
}

impl TickRow {
    pub fn new(t: f64, object: &ObjectState, sensors: usize) -> Self {
        TickRow {
            t,
            true_range: object.range,
            bearing: object.bearing,
            sensors: vec![SensorCell::default(); sensors],
            entry_id: None,
            mode: Mode::FaultStop,
            speed_override: 0.0,
            robot_speed: 0.0,
            latency_s: None,
        }
    }

    pub fn set_robot(&mut self, cmd: Option<&SupervisorCommand>, robot: &RobotState) {
        if let Some(c) = cmd {
            self.entry_id = c.cause_entry_id;
            self.mode = c.mode;
        }
        self.speed_override = robot.applied_override;
        self.robot_speed = robot.actual_speed;
    }

    fn write_csv(&self, quantum: f64, out: &mut String) {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = write!(out, "{},{},{}", self.t, self.true_range, self.bearing);
        for c in &self.sensors {
            let _ = write!(
                out,
                ",{},{}",
                opt(c.measured.map(|r| encode_reading(r, quantum))),
                opt(c.outcome.map(String::from))
            );
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            opt(self.entry_id.map(|e| e.to_string())),
            self.mode,
            self.speed_override,
            self.robot_speed,
            opt(self.latency_s.map(|l| l.to_string()))
        );
    }
}

/// A command as the trace records it, with times relative to the run origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub t: f64,
    pub mode: Mode,
    pub speed_override: f64,
    pub entry_id: Option<EntryId>,
    pub fresh: bool,
    pub latency: Option<f64>,
}

impl CommandRecord {
    pub fn new(cmd: &SupervisorCommand, origin: Timestamp) -> Self {
        CommandRecord {
            t: cmd.issued_at.secs_since(origin),
            mode: cmd.mode,
            speed_override: cmd.speed_override,
            entry_id: cmd.cause_entry_id,
            fresh: cmd.fresh,
            latency: cmd.latency(),
        }
    }
}

/// One sensor value as stored in the channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedPoint {
    pub entry_id: EntryId,
    /// Entry creation time relative to the run origin (whole-second resolution).
    pub created_t: f64,
    /// Precise sample time relative to the run origin, when carried.
    pub sample_t: Option<f64>,
    pub sensor_id: u32,
    pub distance: Option<f64>,
}

/// Flattens channel entries into per-sensor points.
pub fn feed_points(entries: &[ChannelEntry], plan: &RunPlan, origin: Timestamp) -> Vec<FeedPoint> {
    let fence = plan.spec.fence();
    let mut out = Vec::new();
    for e in entries {
        let Ok(decoded) = decode_entry(e, &fence, plan.spec.quantum, plan.spec.max_range, origin)
        else {
            continue;
        };
        for (p, r) in decoded.readings {
            out.push(FeedPoint {
                entry_id: e.entry_id,
                created_t: e.created_at.secs_since(origin),
                sample_t: decoded.sample_time.map(|t| t.secs_since(origin)),
                sensor_id: p.sensor_id,
                distance: r.distance(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub count: usize,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

/// Nearest-rank percentile of sorted data.
fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

impl LatencyStats {
    pub fn from_samples(samples: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = samples.into_iter().collect();
        v.sort_by(f64::total_cmp);
        LatencyStats {
            count: v.len(),
            p50: nearest_rank(&v, 50.0),
            p95: nearest_rank(&v, 95.0),
            max: v.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Counts {
    /// Publish attempts: published + dropped + rate_limited.
    pub attempted: u64,
    pub published: u64,
    /// Lost at the node or in transit; includes `transport_errors`.
    pub dropped: u64,
    pub transport_errors: u64,
    pub rate_limited: u64,
    pub suppressed: u64,
    /// Entries into FAULT_STOP.
    pub stale_faults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub rows: usize,
    pub duration: f64,
    pub tick: f64,
    pub latency: LatencyStats,
    pub safety: SafetyOutcome,
    pub counts: Counts,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Everything a summary needs comes from the rows and the metadata, so a
/// stored trace can be re-scored.
pub fn summarize(meta: &RunMeta, rows: &[TickRow]) -> RunSummary {
    let mut counts = Counts::default();
    for row in rows {
        for c in &row.sensors {
            match c.outcome {
                Some('P') => counts.published += 1,
                Some('D') => counts.dropped += 1,
                Some('E') => {
                    counts.dropped += 1;
                    counts.transport_errors += 1;
                }
                Some('R') => counts.rate_limited += 1,
                Some('S') => counts.suppressed += 1,
                _ => {}
            }
        }
    }
    counts.attempted = counts.published + counts.dropped + counts.rate_limited;
    counts.stale_faults = rows
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            r.mode == Mode::FaultStop && (*i == 0 || rows[i - 1].mode != Mode::FaultStop)
        })
        .count() as u64;

    let robot = RobotConfig {
        nominal_speed: meta.nominal_speed,
        envelope_radius: meta.envelope_radius,
        ..RobotConfig::default()
    };
    let trace: Vec<(ObjectState, RobotState)> = rows
        .iter()
        .map(|r| {
            (
                ObjectState {
                    range: r.true_range,
                    bearing: r.bearing,
                    radial_speed: 0.0,
                },
                RobotState {
                    path_phase: 0.0,
                    actual_speed: r.robot_speed,
                    applied_override: r.speed_override,
                },
            )
        })
        .collect();
    let safety = score_safety(&trace, &robot, &meta.zones()).unwrap_or(SafetyOutcome {
        min_object_clearance: f64::INFINITY,
        stop_achieved_before_d_stop: true,
        violation_ticks: 0,
        collision: false,
    });

    RunSummary {
        schema_version: meta.schema_version,
        rows: rows.len(),
        duration: meta.duration,
        tick: meta.tick,
        latency: LatencyStats::from_samples(rows.iter().filter_map(|r| r.latency_s)),
        safety,
        counts,
    }
}

/// Result of a run in either mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub meta: RunMeta,
    pub rows: Vec<TickRow>,
    pub commands: Vec<CommandRecord>,
    pub feed: Vec<FeedPoint>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn new(
        meta: RunMeta,
        rows: Vec<TickRow>,
        commands: Vec<CommandRecord>,
        feed: Vec<FeedPoint>,
    ) -> Self {
        let summary = summarize(&meta, &rows);
        RunMetrics {
            meta,
            rows,
            commands,
            feed,
            summary,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 2));
        out.push_str(&self.meta.header_line());
        out.push('\n');
        out.push_str(&self.meta.columns().join(","));
        out.push('\n');
        for r in &self.rows {
            r.write_csv(self.meta.quantum, &mut out);
        }
        out
    }

    /// Per-command (mode, override) sequence with consecutive repeats removed.
    pub fn transitions(&self) -> Vec<(Mode, f64)> {
        let mut out: Vec<(Mode, f64)> = Vec::new();
        for c in &self.commands {
            if out.last() != Some(&(c.mode, c.speed_override)) {
                out.push((c.mode, c.speed_override));
            }
        }
        out
    }
}
