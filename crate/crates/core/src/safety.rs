//! Pure domain logic for the proximity fence.
//!
//! Range quantization, zone classification, the proportional speed law,
//! multi-sensor fusion (nearest object and direction of approach) and the
//! staleness test used by the supervisor's failsafe. Everything here is a
//! pure function over immutable values.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{secs_to_micros, Timestamp};

pub const DEFAULT_QUANTUM: f64 = 0.01;
pub const DEFAULT_MAX_RANGE: f64 = 5.0;
pub const DEFAULT_D_STOP: f64 = 0.5;
pub const DEFAULT_D_SLOW: f64 = 2.0;

/// Magnitude below which the weighted bearing vector is considered degenerate.
const BEARING_DEGENERACY: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid(msg: impl Into<String>) -> SafetyError {
    SafetyError::InvalidArgument(msg.into())
}

pub type SensorId = u32;

/// One quantized range observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RangeReading {
    InRange(f64),
    OutOfRange,
}

impl RangeReading {
    pub fn distance(self) -> Option<f64> {
        match self {
            RangeReading::InRange(d) => Some(d),
            RangeReading::OutOfRange => None,
        }
    }

    pub fn is_in_range(self) -> bool {
        matches!(self, RangeReading::InRange(_))
    }

    /// Orders readings by distance, `OutOfRange` being farthest.
    pub fn cmp_distance(&self, other: &RangeReading) -> Ordering {
        match (self, other) {
            (RangeReading::InRange(a), RangeReading::InRange(b)) => a.total_cmp(b),
            (RangeReading::InRange(_), RangeReading::OutOfRange) => Ordering::Less,
            (RangeReading::OutOfRange, RangeReading::InRange(_)) => Ordering::Greater,
            (RangeReading::OutOfRange, RangeReading::OutOfRange) => Ordering::Equal,
        }
    }
}

impl fmt::Display for RangeReading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeReading::InRange(d) => write!(f, "{d}"),
            RangeReading::OutOfRange => f.write_str("out-of-range"),
        }
    }
}

/// Rounds `true_distance` to the nearest multiple of `quantum` (ties away
/// from zero), or reports `OutOfRange` beyond `max_range`.
pub fn quantize_range(
    true_distance: f64,
    quantum: f64,
    max_range: f64,
) -> Result<RangeReading, SafetyError> {
    if !(true_distance >= 0.0) {
        return Err(invalid(format!(
            "distance must be >= 0, got {true_distance}"
        )));
    }
    if !(quantum > 0.0) || !quantum.is_finite() {
        return Err(invalid(format!("quantum must be > 0, got {quantum}")));
    }
    if !(max_range > 0.0) || !max_range.is_finite() {
        return Err(invalid(format!("max_range must be > 0, got {max_range}")));
    }
    if true_distance > max_range {
        return Ok(RangeReading::OutOfRange);
    }
    let mut steps = (true_distance / quantum).round();
    // The division can land on the wrong side of a half step; pick the
    // neighbour that actually honours the half-quantum error bound.
    let half = quantum / 2.0;
    if (multiple(steps, quantum) - true_distance).abs() > half {
        let down = steps - 1.0;
        let up = steps + 1.0;
        if (multiple(down, quantum) - true_distance).abs() <= half {
            steps = down;
        } else if (multiple(up, quantum) - true_distance).abs() <= half {
            steps = up;
        }
    }
    while steps > 0.0 && multiple(steps, quantum) > max_range {
        steps -= 1.0;
    }
    Ok(RangeReading::InRange(multiple(steps.max(0.0), quantum)))
}

/// `steps × quantum`, as the double nearest the decimal value when the
/// quantum has a short decimal form (so 481 × 0.01 is exactly `4.81`).
fn multiple(steps: f64, quantum: f64) -> f64 {
    let scale = 10f64.powi(quantum_decimals(quantum) as i32);
    let scaled = quantum * scale;
    if (scaled - scaled.round()).abs() < 1e-9 {
        steps * scaled.round() / scale
    } else {
        steps * quantum
    }
}

/// True when `value` is an integer multiple of `quantum` as produced by
/// [`quantize_range`].
pub fn is_quantized(value: f64, quantum: f64) -> bool {
    let steps = (value / quantum).round();
    (steps * quantum - value).abs() <= quantum * 1e-9
}

/// Number of decimals needed to print multiples of `quantum` exactly.
pub fn quantum_decimals(quantum: f64) -> usize {
    (0..=9)
        .find(|&d| {
            let scaled = quantum * 10f64.powi(d as i32);
            (scaled - scaled.round()).abs() < 1e-9
        })
        .unwrap_or(9)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds {
    pub d_stop: f64,
    pub d_slow: f64,
}

impl ZoneThresholds {
    pub fn new(d_stop: f64, d_slow: f64, max_range: f64) -> Result<Self, SafetyError> {
        let z = ZoneThresholds { d_stop, d_slow };
        z.validate(max_range)?;
        Ok(z)
    }

    pub fn validate(&self, max_range: f64) -> Result<(), SafetyError> {
        if !(self.d_stop > 0.0) {
            return Err(invalid(format!("d_stop must be > 0, got {}", self.d_stop)));
        }
        if !(self.d_stop < self.d_slow) {
            return Err(invalid(format!(
                "d_stop ({}) must be < d_slow ({})",
                self.d_stop, self.d_slow
            )));
        }
        if !(self.d_slow <= max_range) {
            return Err(invalid(format!(
                "d_slow ({}) must be <= max_range ({max_range})",
                self.d_slow
            )));
        }
        Ok(())
    }
}

impl Default for ZoneThresholds {
    fn default() -> Self {
        ZoneThresholds {
            d_stop: DEFAULT_D_STOP,
            d_slow: DEFAULT_D_SLOW,
        }
    }
}

/// Concentric band around the robot base. Ordered nearest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Zone {
    Stop,
    Slow,
    Clear,
}

pub fn classify_zone(reading: RangeReading, z: &ZoneThresholds) -> Zone {
    match reading {
        RangeReading::OutOfRange => Zone::Clear,
        RangeReading::InRange(d) if d >= z.d_slow => Zone::Clear,
        RangeReading::InRange(d) if d <= z.d_stop => Zone::Stop,
        RangeReading::InRange(_) => Zone::Slow,
    }
}

/// Piecewise-linear speed override: 0 inside `d_stop`, 1 beyond `d_slow`,
/// linear in between.
pub fn speed_override(reading: RangeReading, z: &ZoneThresholds) -> f64 {
    match reading {
        RangeReading::OutOfRange => 1.0,
        RangeReading::InRange(d) if d >= z.d_slow => 1.0,
        RangeReading::InRange(d) if d <= z.d_stop => 0.0,
        RangeReading::InRange(d) => ((d - z.d_stop) / (z.d_slow - z.d_stop)).clamp(0.0, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPlacement {
    pub sensor_id: SensorId,
    /// Degrees in [0, 360).
    pub bearing: f64,
    pub mount_radius: f64,
}

impl SensorPlacement {
    pub fn new(sensor_id: SensorId, bearing: f64, mount_radius: f64) -> Self {
        SensorPlacement {
            sensor_id,
            bearing: normalize_bearing(bearing),
            mount_radius,
        }
    }
}

/// Maps any angle in degrees onto [0, 360).
pub fn normalize_bearing(deg: f64) -> f64 {
    let b = deg.rem_euclid(360.0);
    if b >= 360.0 {
        0.0
    } else {
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedEstimate {
    pub min_distance: RangeReading,
    pub approach_bearing: Option<f64>,
}

/// Combines the fence's readings into the nearest distance and a weighted
/// circular-mean bearing of approach.
pub fn fuse(
    readings: &[(SensorPlacement, RangeReading)],
    max_range: f64,
) -> Result<FusedEstimate, SafetyError> {
    if readings.is_empty() {
        return Err(invalid("fuse needs at least one reading"));
    }
    for (i, (a, _)) in readings.iter().enumerate() {
        if readings[..i]
            .iter()
            .any(|(b, _)| b.sensor_id == a.sensor_id)
        {
            return Err(invalid(format!("duplicate sensor id {}", a.sensor_id)));
        }
    }

    let min_distance = readings
        .iter()
        .map(|(_, r)| *r)
        .min_by(|a, b| a.cmp_distance(b))
        .unwrap_or(RangeReading::OutOfRange);

    let in_range: Vec<(&SensorPlacement, f64)> = readings
        .iter()
        .filter_map(|(p, r)| r.distance().map(|d| (p, d)))
        .collect();
    if in_range.is_empty() {
        return Ok(FusedEstimate {
            min_distance,
            approach_bearing: None,
        });
    }

    let (mut x, mut y) = (0.0f64, 0.0f64);
    for (p, d) in &in_range {
        let w = (max_range - d).max(0.0);
        let rad = p.bearing.to_radians();
        x += w * rad.cos();
        y += w * rad.sin();
    }
    let bearing = if x.hypot(y) < BEARING_DEGENERACY {
        in_range
            .iter()
            .min_by_key(|(p, _)| p.sensor_id)
            .map(|(p, _)| p.bearing)
            .expect("non-empty")
    } else {
        normalize_bearing(y.atan2(x).to_degrees())
    };
    Ok(FusedEstimate {
        min_distance,
        approach_bearing: Some(bearing),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessPolicy {
    /// Seconds.
    pub stale_after: f64,
}

impl StalenessPolicy {
    pub fn new(stale_after: f64) -> Result<Self, SafetyError> {
        if !(stale_after > 0.0) {
            return Err(invalid(format!(
                "stale_after must be > 0, got {stale_after}"
            )));
        }
        Ok(StalenessPolicy { stale_after })
    }
}

/// True iff the sample is strictly older than `stale_after`.
pub fn is_stale(
    sample_time: Timestamp,
    now: Timestamp,
    policy: &StalenessPolicy,
) -> Result<bool, SafetyError> {
    let age = now.micros_since(sample_time);
    if age < 0 {
        return Err(invalid(format!(
            "sample time {sample_time} is after now {now}"
        )));
    }
    Ok(age > secs_to_micros(policy.stale_after))
}
