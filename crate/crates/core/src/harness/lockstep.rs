//! Deterministic single-threaded engine on simulated time.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::ciot::{Broker, LocalClient};
use crate::robot::{advance, apply_command, RobotState};
use crate::sensor::{PublishOutcome, Sampled, SensorNode};
use crate::supervisor::{poll_once, sample_time_slot, SupervisorCommand, SupervisorState};
use crate::time::{SimClock, Timestamp};

use super::metrics::{feed_points, CommandRecord, RunMeta, RunMetrics, TickRow};
use super::scenario::{RunPlan, ScenarioSpec};
use super::HarnessError;

/// Runs the whole loop tick by tick. Within a tick: object, due sensors
/// (ascending id), broker deliveries, supervisor poll, robot, row.
pub fn run_lockstep(spec: &ScenarioSpec) -> Result<RunMetrics, HarnessError> {
    let plan = RunPlan::new(spec)?;
    let origin = Timestamp::SIM_EPOCH;
    let clock = Arc::new(SimClock::new(origin));
    let broker = Arc::new(Broker::new(vec![plan.channel_config()])?);
    let mut client = LocalClient::new(broker.clone(), plan.access(), clock.clone());

    let mut nodes: Vec<SensorNode> = plan
        .sensors
        .iter()
        .map(|s| {
            SensorNode::new(
                s.config.clone(),
                s.slot,
                sample_time_slot(),
                origin,
                spec.seed,
            )
        })
        .collect();
    let sup_cfg = plan.supervisor_config(origin);
    let mut sup = SupervisorState::initial();
    let robot_cfg = spec.robot;
    let mut robot = RobotState::at_rest();
    let dt = plan.tick_secs();

    let mut current: Option<SupervisorCommand> = None;
    // (due, sequence) -> (sensor index, sample)
    let mut in_flight: BTreeMap<(i64, u64), (usize, Sampled)> = BTreeMap::new();
    let mut seq = 0u64;
    let mut rows = Vec::with_capacity(plan.rows);
    let mut commands = Vec::new();

    for k in 0..plan.rows {
        let t_us = k as i64 * plan.tick_us;
        let now = origin.add_micros(t_us);
        clock.set(now);
        let object = plan.trajectory.at(t_us);
        let mut row = TickRow::new(plan.row_time(k), &object, nodes.len());

        for (i, node) in nodes.iter_mut().enumerate() {
            if !plan.sample_due(i, t_us) {
                continue;
            }
            let sampled = node.prepare(&object, now);
            row.sensors[i].measured = Some(sampled.reading);
            if sampled.frame.is_some() {
                in_flight.insert((plan.delivery_due(i, t_us), seq), (i, sampled));
                seq += 1;
            } else if let Some(o) = sampled.local_outcome {
                row.sensors[i].outcome = Some(o.code());
            }
        }

        while let Some(entry) = in_flight.first_entry() {
            if entry.key().0 > t_us {
                break;
            }
            let (i, sampled) = entry.remove();
            let outcome = if plan.in_blackout(t_us) {
                PublishOutcome::Dropped {
                    transport_error: true,
                }
            } else {
                nodes[i].deliver(&sampled, &mut client)
            };
            row.sensors[i].outcome = Some(outcome.code());
        }

        if t_us % plan.poll_us == 0 {
            let (next, cmd) = poll_once(&sup, &sup_cfg, &mut client, now);
            sup = next;
            row.latency_s = cmd.latency();
            commands.push(CommandRecord::new(&cmd, origin));
            current = Some(cmd);
        }

        if let Some(cmd) = &current {
            robot = apply_command(&robot, cmd, &robot_cfg, dt);
        }
        robot = advance(&robot, &robot_cfg, dt);
        row.set_robot(current.as_ref(), &robot);
        rows.push(row);
    }

    let log = broker.full_log(plan.spec.channel.channel_id)?;
    let feed = feed_points(&log, &plan, origin);
    Ok(RunMetrics::new(
        RunMeta::from_plan(&plan),
        rows,
        commands,
        feed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checks::{slow_penetration, stop_penetration};
    use crate::supervisor::Mode;

    #[test]
    fn one_second_is_one_hundred_rows() {
        let mut s = ScenarioSpec::canonical();
        s.duration = 1.0;
        let m = run_lockstep(&s).unwrap();
        assert_eq!(m.rows.len(), 100);
        assert_eq!(m.summary.rows, 100);
    }

    #[test]
    fn canonical_stops_in_time() {
        let m = run_lockstep(&ScenarioSpec::canonical()).unwrap();
        assert!(
            m.summary.safety.stop_achieved_before_d_stop,
            "{:?}",
            m.summary
        );
        assert_eq!(m.summary.safety.violation_ticks, 0);
        assert_eq!(m.summary.counts.published, 12);
        let bound = 0.5 * (1.0 + 0.25 + 0.01) + 1e-9;
        assert!(slow_penetration(&m).unwrap() <= bound);
        assert!(stop_penetration(&m).unwrap() <= bound);
        assert_eq!(m.rows[0].mode, Mode::Clear);
    }

    #[test]
    fn slow_writes_miss_the_stop() {
        let mut s = ScenarioSpec::canonical();
        s.timing.write_interval = 4.0;
        s.timing.stale_after = Some(12.0);
        let m = run_lockstep(&s).unwrap();
        assert!(!m.summary.safety.stop_achieved_before_d_stop);
    }

    #[test]
    fn identical_runs_are_identical() {
        let mut s = ScenarioSpec::canonical();
        s.sensors[0].noise_sigma = 0.01;
        s.comms.dropout_prob = 0.2;
        let a = run_lockstep(&s).unwrap();
        let b = run_lockstep(&s).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        s.seed += 1;
        assert_ne!(a.to_csv(), run_lockstep(&s).unwrap().to_csv());
    }
}
