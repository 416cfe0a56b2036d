//! A speed-scalable stand-in for the robot arm: a one-degree-of-freedom
//! cyclic path whose speed is the nominal speed times the latest override.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::safety::ZoneThresholds;
use crate::sensor::ObjectState;
use crate::supervisor::SupervisorCommand;

pub const DEFAULT_NOMINAL_SPEED: f64 = 0.2;
pub const DEFAULT_ENVELOPE_RADIUS: f64 = 0.3;

/// Relative slack when deciding a slewed speed has reached its target.
const SLEW_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobotError {
    #[error("invalid robot configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    /// Out-and-back sweep along a segment of `length` meters.
    Sweep { length: f64 },
}

impl PathSpec {
    /// Distance covered in one full cycle.
    pub fn path_length(&self) -> f64 {
        match self {
            PathSpec::Sweep { length } => 2.0 * length,
        }
    }
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::Sweep { length: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub nominal_speed: f64,
    pub envelope_radius: f64,
    #[serde(default)]
    pub path: PathSpec,
    /// m/s², applied to both deceleration and acceleration.
    #[serde(default)]
    pub decel_limit: Option<f64>,
}

impl Default for RobotConfig {
    fn default() -> Self {
        RobotConfig {
            nominal_speed: DEFAULT_NOMINAL_SPEED,
            envelope_radius: DEFAULT_ENVELOPE_RADIUS,
            path: PathSpec::default(),
            decel_limit: None,
        }
    }
}

impl RobotConfig {
    pub fn validate(&self, zones: &ZoneThresholds) -> Result<(), RobotError> {
        let err = |m: String| Err(RobotError::InvalidConfig(m));
        if !(self.nominal_speed > 0.0 && self.nominal_speed.is_finite()) {
            return err(format!(
                "nominal_speed must be > 0, got {}",
                self.nominal_speed
            ));
        }
        if !(self.envelope_radius > 0.0 && self.envelope_radius.is_finite()) {
            return err(format!(
                "envelope_radius must be > 0, got {}",
                self.envelope_radius
            ));
        }
        if self.envelope_radius >= zones.d_stop {
            return err(format!(
                "envelope_radius {} must be smaller than d_stop {}",
                self.envelope_radius, zones.d_stop
            ));
        }
        let len = self.path.path_length();
        if !(len > 0.0 && len.is_finite()) {
            return err(format!("path length must be > 0, got {len}"));
        }
        if let Some(a) = self.decel_limit {
            if !(a > 0.0 && a.is_finite()) {
                return err(format!("decel_limit must be > 0, got {a}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RobotState {
    /// Position along the cycle, in [0, 1).
    pub path_phase: f64,
    pub actual_speed: f64,
    pub applied_override: f64,
}

impl RobotState {
    pub fn at_rest() -> Self {
        Self::default()
    }
}

/// Moves the speed toward `nominal × override`.
pub fn apply_command(
    state: &RobotState,
    cmd: &SupervisorCommand,
    config: &RobotConfig,
    dt: f64,
) -> RobotState {
    apply_override(state, cmd.speed_override, config, dt)
}

pub fn apply_override(
    state: &RobotState,
    speed_override: f64,
    config: &RobotConfig,
    dt: f64,
) -> RobotState {
    debug_assert!(dt > 0.0);
    let ov = speed_override.clamp(0.0, 1.0);
    let target = config.nominal_speed * ov;
    let actual_speed = match config.decel_limit {
        None => target,
        Some(a) => {
            let step = a * dt;
            let diff = target - state.actual_speed;
            if diff.abs() <= step * (1.0 + SLEW_SNAP) {
                target
            } else {
                state.actual_speed + step.copysign(diff)
            }
        }
    };
    RobotState {
        path_phase: state.path_phase,
        actual_speed: actual_speed.clamp(0.0, config.nominal_speed),
        applied_override: ov,
    }
}

/// Integrates the path phase over `dt`.
pub fn advance(state: &RobotState, config: &RobotConfig, dt: f64) -> RobotState {
    if state.actual_speed == 0.0 {
        return *state;
    }
    let delta = state.actual_speed * dt / config.path.path_length();
    let mut phase = (state.path_phase + delta).rem_euclid(1.0);
    if phase >= 1.0 {
        phase = 0.0;
    }
    RobotState {
        path_phase: phase,
        ..*state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyOutcome {
    pub min_object_clearance: f64,
    pub stop_achieved_before_d_stop: bool,
    pub violation_ticks: u64,
    pub collision: bool,
}

/// Aggregates a per-tick trace. Returns `None` for an empty trace.
pub fn score_safety(
    trace: &[(ObjectState, RobotState)],
    config: &RobotConfig,
    zones: &ZoneThresholds,
) -> Option<SafetyOutcome> {
    if trace.is_empty() {
        return None;
    }
    let mut min_clearance = f64::INFINITY;
    let mut violations = 0;
    let mut stop_ok = true;
    // Only the first continuous stay inside d_stop is judged.
    let mut inside = false;
    let mut judged = false;
    for (obj, robot) in trace {
        min_clearance = min_clearance.min(obj.range - config.envelope_radius);
        if obj.range <= config.envelope_radius && robot.actual_speed > 0.0 {
            violations += 1;
        }
        if obj.range <= zones.d_stop {
            if !judged {
                inside = true;
                if robot.actual_speed != 0.0 {
                    stop_ok = false;
                }
            }
        } else if inside {
            inside = false;
            judged = true;
        }
    }
    Some(SafetyOutcome {
        min_object_clearance: min_clearance,
        stop_achieved_before_d_stop: stop_ok,
        violation_ticks: violations,
        collision: violations > 0,
    })
}
