use std::fs;

use proptest::prelude::*;

use fencewire::harness::checks::failsafe_dominance;
use fencewire::harness::metrics::RUN_HEADER_TAG;
use fencewire::harness::report::{DISTANCE_SVG, OVERRIDE_SVG, RUN_CSV, SPEED_SVG, SUMMARY_JSON};
use fencewire::harness::{emit_report, replay, run_lockstep, ReplayError, ScenarioSpec};
use fencewire::supervisor::Mode;

fn noisy() -> ScenarioSpec {
    let mut s = ScenarioSpec::canonical();
    s.sensors[0].noise_sigma = 0.01;
    s.comms.dropout_prob = 0.15;
    s.comms.uplink_delay = 0.05;
    s
}

#[test]
fn report_is_idempotent_with_exact_header() {
    let m = run_lockstep(&ScenarioSpec::canonical()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&m, dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    emit_report(&m, dir.path()).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    let csv = fs::read_to_string(dir.path().join(RUN_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        format!(
            "{RUN_HEADER_TAG} schema_version=1 tick=0.01 duration=12 rows=1200 quantum=0.01 \
             d_stop=0.5 d_slow=2 envelope_radius=0.3 nominal_speed=0.2 sensors=1"
        )
    );
    assert_eq!(
        lines.next().unwrap(),
        "t,true_range,bearing,s1_measured,s1_outcome,entry_id,mode,override,robot_speed,latency_s"
    );
    assert_eq!(csv.lines().count(), 2 + 1200);
    assert!(csv.ends_with('\n'));
}

#[test]
fn single_tick_run_still_reports() {
    let mut s = ScenarioSpec::canonical();
    s.duration = s.tick;
    let m = run_lockstep(&s).unwrap();
    assert_eq!(m.rows.len(), 1);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&m, dir.path()).unwrap();
    assert_eq!(
        fs::read_to_string(dir.path().join(RUN_CSV))
            .unwrap()
            .lines()
            .count(),
        3
    );
    for name in [DISTANCE_SVG, OVERRIDE_SVG, SPEED_SVG] {
        let svg = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(
            svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"),
            "{name}"
        );
        assert!(!svg.contains("NaN") && !svg.contains("inf"), "{name}");
    }
}

#[test]
fn replay_round_trips() {
    let m = run_lockstep(&noisy()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&m, dir.path()).unwrap();
    let report = replay(&dir.path().join(RUN_CSV)).unwrap();
    assert_eq!(report.matches(), Some(true));
    assert_eq!(report.summary, m.summary);
}

#[test]
fn replay_rejects_damaged_traces() {
    let m = run_lockstep(&ScenarioSpec::canonical()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&m, dir.path()).unwrap();
    let path = dir.path().join(RUN_CSV);
    let csv = fs::read_to_string(&path).unwrap();

    let cut = &csv[..csv.len() * 2 / 3];
    fs::write(&path, cut).unwrap();
    assert!(matches!(replay(&path), Err(ReplayError::Schema(_))));

    fs::write(
        &path,
        csv.replacen("schema_version=1", "schema_version=0", 1),
    )
    .unwrap();
    assert!(matches!(
        replay(&path),
        Err(ReplayError::Version { found: 0, .. })
    ));

    fs::write(&path, csv.replacen("robot_speed", "speed", 1)).unwrap();
    assert!(matches!(replay(&path), Err(ReplayError::Schema(_))));

    fs::write(&path, &csv).unwrap();
    fs::write(dir.path().join(SUMMARY_JSON), "{").unwrap();
    assert!(matches!(replay(&path), Err(ReplayError::Summary(_))));
}

#[test]
fn publish_attempts_are_conserved() {
    let mut s = noisy();
    s.timing.min_write_interval = 1.0;
    s.comms.blackouts = vec![(3.0, 5.0)];
    let m = run_lockstep(&s).unwrap();
    let c = &m.summary.counts;
    assert_eq!(c.attempted, c.published + c.dropped + c.rate_limited);
    assert!(c.transport_errors <= c.dropped);
    assert!(c.transport_errors > 0);
    assert_eq!(c.published as usize, m.feed.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn blackouts_never_let_stale_data_move_the_robot(
        start in 0.0f64..10.0,
        len in 0.5f64..8.0,
        seed in any::<u64>(),
        dropout in 0.0f64..0.4,
    ) {
        let mut s = noisy();
        s.seed = seed;
        s.comms.dropout_prob = dropout;
        s.comms.blackouts = vec![(start, start + len)];
        let m = run_lockstep(&s).unwrap();
        let check = failsafe_dominance(&m, s.timing.stale_after());
        prop_assert!(check.passed, "{}", check.detail);
        for r in &m.rows {
            if r.mode == Mode::FaultStop {
                prop_assert_eq!(r.speed_override, 0.0);
            }
        }
        let c = &m.summary.counts;
        prop_assert_eq!(c.attempted, c.published + c.dropped + c.rate_limited);
    }
}
