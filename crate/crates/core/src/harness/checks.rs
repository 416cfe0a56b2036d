//! Safety and timing bounds a finished run must satisfy.

use std::collections::HashMap;

use crate::supervisor::Mode;

use super::metrics::{RunMetrics, TickRow};
use super::scenario::ScenarioSpec;

/// Slack for comparing ages built from separately rounded times.
const AGE_SLACK: f64 = 1e-6;
/// Allowance above `write_interval + poll_interval` for loopback runs.
pub const REALTIME_LATENCY_SLACK: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl BoundCheck {
    fn new(name: &'static str, failures: Vec<String>, ok_detail: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed {
            ok_detail
        } else {
            let n = failures.len();
            let mut shown: Vec<_> = failures.into_iter().take(3).collect();
            if n > 3 {
                shown.push(format!("... {} more", n - 3));
            }
            shown.join("; ")
        };
        BoundCheck {
            name,
            passed,
            detail,
        }
    }
}

/// Every command acting on missing or stale data, and every halt mode,
/// must carry override 0.
pub fn failsafe_dominance(m: &RunMetrics, stale_after: f64) -> BoundCheck {
    let created: HashMap<u64, f64> = m.feed.iter().map(|p| (p.entry_id, p.created_t)).collect();
    let mut bad = Vec::new();
    for c in &m.commands {
        if c.mode.is_halt() && c.speed_override != 0.0 {
            bad.push(format!(
                "t={}: {} with override {}",
                c.t, c.mode, c.speed_override
            ));
            continue;
        }
        let age = c
            .entry_id
            .and_then(|id| created.get(&id))
            .map(|ct| c.t - ct);
        let stale = age.is_none_or(|a| a > stale_after + AGE_SLACK);
        if stale && c.speed_override != 0.0 {
            bad.push(format!(
                "t={}: override {} on data aged {}",
                c.t,
                c.speed_override,
                age.map_or("(none)".to_string(), |a| format!("{a:.3} s"))
            ));
        }
        if c.mode == Mode::FaultStop && c.speed_override != 0.0 {
            bad.push(format!("t={}: FAULT_STOP with motion", c.t));
        }
    }
    BoundCheck::new(
        "failsafe dominance",
        bad,
        format!("{} commands", m.commands.len()),
    )
}

pub fn speed_bound(m: &RunMetrics) -> BoundCheck {
    let bad = m
        .rows
        .iter()
        .filter(|r| r.robot_speed > m.meta.nominal_speed)
        .map(|r| format!("t={}: speed {}", r.t, r.robot_speed))
        .collect();
    BoundCheck::new(
        "speed bound",
        bad,
        format!("<= {} m/s", m.meta.nominal_speed),
    )
}

pub fn envelope_clear(m: &RunMetrics) -> BoundCheck {
    let s = &m.summary.safety;
    let bad = if s.violation_ticks > 0 {
        vec![format!(
            "{} ticks with the object inside the envelope while moving",
            s.violation_ticks
        )]
    } else {
        vec![]
    };
    BoundCheck::new(
        "envelope clear",
        bad,
        format!("min clearance {:.3} m", s.min_object_clearance),
    )
}

pub fn stop_before_d_stop(m: &RunMetrics) -> BoundCheck {
    let bad = if m.summary.safety.stop_achieved_before_d_stop {
        vec![]
    } else {
        vec!["robot still moving when the object reached d_stop".to_string()]
    };
    BoundCheck::new("stop before d_stop", bad, "stopped in time".into())
}

pub fn latency_bound(m: &RunMetrics, spec: &ScenarioSpec) -> BoundCheck {
    let bound = spec.timing.write_interval + spec.timing.poll_interval + REALTIME_LATENCY_SLACK;
    let l = &m.summary.latency;
    let bad = match l.p95 {
        None => vec!["no latency samples".to_string()],
        Some(p) if p > bound => vec![format!("p95 {p:.4} s > {bound:.4} s")],
        Some(_) => vec![],
    };
    BoundCheck::new(
        "latency p95",
        bad,
        format!(
            "p95 {:.4} s <= {bound:.4} s over {} samples",
            l.p95.unwrap_or(f64::NAN),
            l.count
        ),
    )
}

/// All bounds applicable to a run; real-time runs add the latency bound.
pub fn check_run(m: &RunMetrics, spec: &ScenarioSpec, realtime: bool) -> Vec<BoundCheck> {
    let mut out = vec![
        failsafe_dominance(m, spec.timing.stale_after()),
        speed_bound(m),
        envelope_clear(m),
        stop_before_d_stop(m),
    ];
    if realtime {
        out.push(latency_bound(m, spec));
    }
    out
}

/// How far past `threshold` the object was when `effective` first held
/// after the object crossed in. `None` if it never crossed; infinite if
/// the response never came.
pub fn penetration(
    rows: &[TickRow],
    crossed: impl Fn(&TickRow) -> bool,
    effective: impl Fn(&TickRow) -> bool,
    threshold: f64,
) -> Option<f64> {
    let start = rows.iter().position(&crossed)?;
    Some(
        rows[start..]
            .iter()
            .find(|r| effective(r))
            .map_or(f64::INFINITY, |r| (threshold - r.true_range).max(0.0)),
    )
}

/// Penetration past `d_slow` before the supervisor restricts motion.
pub fn slow_penetration(m: &RunMetrics) -> Option<f64> {
    let d = m.meta.d_slow;
    penetration(&m.rows, |r| r.true_range < d, |r| r.mode != Mode::Clear, d)
}

/// Penetration past `d_stop` before the robot is at rest.
pub fn stop_penetration(m: &RunMetrics) -> Option<f64> {
    let d = m.meta.d_stop;
    penetration(&m.rows, |r| r.true_range <= d, |r| r.robot_speed == 0.0, d)
}
