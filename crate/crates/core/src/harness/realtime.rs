//! Wall-clock engine: broker over loopback HTTP, one thread per sensor
//! node, one for the supervisor, and the robot on the calling thread.

use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::ciot::{bind, Broker, ChannelClient, HttpClient};
use crate::robot::{advance, apply_command, RobotState};
use crate::sensor::{PublishOutcome, SensorNode};
use crate::supervisor::{
    sample_time_slot, CommandSlot, CommandStream, RealtimeTicker, SupervisorCommand,
};
use crate::time::{Clock, RunClock};

use super::metrics::{feed_points, CommandRecord, RunMeta, RunMetrics, TickRow};
use super::scenario::{RunPlan, ScenarioSpec};
use super::HarnessError;

/// Entries fetched at the end of a run for the report (the service's cap).
const FEED_FETCH_LIMIT: usize = 8000;

#[derive(Debug, Clone)]
pub struct RealtimeOptions {
    /// Use an already running broker instead of spawning one.
    pub endpoint: Option<String>,
    /// Where the spawned broker listens.
    pub bind_addr: SocketAddr,
}

impl Default for RealtimeOptions {
    fn default() -> Self {
        RealtimeOptions {
            endpoint: None,
            bind_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }
}

enum Event {
    Sample {
        sensor: usize,
        t_us: i64,
        reading: crate::safety::RangeReading,
    },
    Outcome {
        sensor: usize,
        t_us: i64,
        code: char,
    },
    Command(SupervisorCommand),
}

fn sleep_until(started: Instant, offset_us: i64) {
    let deadline = started + Duration::from_micros(offset_us.max(0) as u64);
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

pub fn run_realtime(
    spec: &ScenarioSpec,
    opts: &RealtimeOptions,
) -> Result<RunMetrics, HarnessError> {
    let plan = RunPlan::new(spec)?;
    let clock = Arc::new(RunClock::start());
    let origin = clock.origin();
    let started = clock.started();

    let server = match &opts.endpoint {
        Some(_) => None,
        None => {
            let broker = Arc::new(Broker::new(vec![plan.channel_config()])?);
            Some(bind(opts.bind_addr, broker, clock.clone())?)
        }
    };
    let endpoint = match (&opts.endpoint, &server) {
        (Some(e), _) => e.clone(),
        (None, Some(s)) => s.endpoint(),
        (None, None) => unreachable!("server spawned when no endpoint is given"),
    };
    log::info!("real-time run against {endpoint}");

    let (tx, rx) = mpsc::channel::<Event>();
    let slot = CommandSlot::new();
    let dt = plan.tick_secs();
    let robot_cfg = spec.robot;
    let mut rows = Vec::with_capacity(plan.rows);

    std::thread::scope(|scope| {
        for (i, ps) in plan.sensors.iter().enumerate() {
            let tx = tx.clone();
            let clock = clock.clone();
            let plan = &plan;
            let endpoint = endpoint.clone();
            scope.spawn(move || {
                let mut node = SensorNode::new(
                    ps.config.clone(),
                    ps.slot,
                    sample_time_slot(),
                    origin,
                    spec.seed,
                );
                let mut client = HttpClient::new(&endpoint, plan.access());
                let mut m = 0i64;
                loop {
                    let due = ps.offset_us + m * plan.write_us;
                    if due >= plan.duration_us {
                        break;
                    }
                    m += 1;
                    sleep_until(started, due);
                    let now = clock.now();
                    let t_us = now.micros_since(origin);
                    let sampled = node.prepare(&plan.trajectory.at(t_us), now);
                    let _ = tx.send(Event::Sample {
                        sensor: i,
                        t_us,
                        reading: sampled.reading,
                    });
                    let code = if sampled.frame.is_some() {
                        if ps.uplink_delay_us > 0 {
                            sleep_until(started, t_us + ps.uplink_delay_us);
                        }
                        if plan.in_blackout(clock.elapsed_micros()) {
                            PublishOutcome::Dropped {
                                transport_error: true,
                            }
                        } else {
                            node.deliver(&sampled, &mut client)
                        }
                    } else {
                        sampled.local_outcome.unwrap_or(PublishOutcome::Dropped {
                            transport_error: false,
                        })
                    };
                    let _ = tx.send(Event::Outcome {
                        sensor: i,
                        t_us: clock.elapsed_micros(),
                        code: code.code(),
                    });
                }
            });
        }

        {
            let tx = tx.clone();
            let clock = clock.clone();
            let slot = slot.clone();
            let plan = &plan;
            let endpoint = endpoint.clone();
            scope.spawn(move || {
                let ticker = RealtimeTicker::new(clock, started, spec.timing.poll_interval);
                let client = HttpClient::new(&endpoint, plan.access());
                let stream = CommandStream::new(plan.supervisor_config(origin), client, ticker)
                    .expect("plan validated the supervisor configuration");
                for cmd in stream {
                    if cmd.issued_at.micros_since(origin) >= plan.duration_us {
                        break;
                    }
                    slot.offer(cmd.clone());
                    let _ = tx.send(Event::Command(cmd));
                }
            });
        }

        let mut robot = RobotState::at_rest();
        let mut last_applied = None;
        for k in 0..plan.rows {
            let t_us = k as i64 * plan.tick_us;
            sleep_until(started, t_us);
            let object = plan.trajectory.at(t_us);
            let mut row = TickRow::new(plan.row_time(k), &object, plan.sensors.len());
            let cmd = slot.latest();
            if let Some(c) = &cmd {
                if last_applied != Some(c.issued_at) {
                    last_applied = Some(c.issued_at);
                    row.latency_s = c.latency();
                }
                robot = apply_command(&robot, c, &robot_cfg, dt);
            }
            robot = advance(&robot, &robot_cfg, dt);
            row.set_robot(cmd.as_ref(), &robot);
            rows.push(row);
        }
    });
    drop(tx);

    let last_row = rows.len().saturating_sub(1);
    let row_of = |t_us: i64| ((t_us.max(0) / plan.tick_us) as usize).min(last_row);
    let mut commands = Vec::new();
    for ev in rx.try_iter() {
        match ev {
            Event::Sample {
                sensor,
                t_us,
                reading,
            } => {
                rows[row_of(t_us)].sensors[sensor].measured = Some(reading);
            }
            Event::Outcome { sensor, t_us, code } => {
                let mut r = row_of(t_us);
                // Two outcomes of one sensor cannot share a row; push later ones on.
                while rows[r].sensors[sensor].outcome.is_some() && r < last_row {
                    r += 1;
                }
                rows[r].sensors[sensor].outcome = Some(code);
            }
            Event::Command(cmd) => commands.push(CommandRecord::new(&cmd, origin)),
        }
    }

    let mut reader = HttpClient::new(&endpoint, plan.access());
    let log = reader.fetch_feed(FEED_FETCH_LIMIT)?;
    let feed = feed_points(&log, &plan, origin);
    if let Some(s) = server {
        s.shutdown()?;
    }
    Ok(RunMetrics::new(
        RunMeta::from_plan(&plan),
        rows,
        commands,
        feed,
    ))
}
