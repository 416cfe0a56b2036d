use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use fencewire::ciot::{self, Broker, BrokerConfig, ServerError};
use fencewire::harness::{
    check_run, emit_report, replay, run_lockstep, run_realtime, HarnessError, RealtimeOptions,
    ReplayError, RunMetrics, ScenarioSpec,
};
use fencewire::time::SystemClock;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_BOUND: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fencewire",
    version,
    about = "Cloud-mediated proximity fence for a robot arm"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Lockstep,
    Realtime,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write run.csv, summary.json and plots.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "lockstep")]
        mode: Mode,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Real-time mode only: use a running broker instead of spawning one.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Serve channels over HTTP.
    Broker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3000)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Recompute a summary from run.csv and compare it with summary.json.
    Replay {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn load_scenario(path: &Path) -> Result<ScenarioSpec, ExitCode> {
    let spec = ScenarioSpec::load(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_VALIDATION)
    })?;
    spec.validate().map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_VALIDATION)
    })?;
    Ok(spec)
}

fn harness_exit(e: &HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn print_summary(m: &RunMetrics) {
    let s = &m.summary;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "rows {}  published {}  dropped {}  rate-limited {}  faults {}",
        s.rows, s.counts.published, s.counts.dropped, s.counts.rate_limited, s.counts.stale_faults
    );
    println!(
        "latency p50 {} s  p95 {} s  max {} s ({} samples)",
        fmt(s.latency.p50),
        fmt(s.latency.p95),
        fmt(s.latency.max),
        s.latency.count
    );
    println!(
        "min clearance {:.3} m  stop before d_stop {}  violation ticks {}",
        s.safety.min_object_clearance,
        s.safety.stop_achieved_before_d_stop,
        s.safety.violation_ticks
    );
}

fn cmd_run(
    scenario: &Path,
    mode: Mode,
    seed: Option<u64>,
    out: &Path,
    endpoint: Option<String>,
) -> ExitCode {
    let mut spec = match load_scenario(scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    log::info!(
        "running {:?}: {} sensor(s), {} s, seed {}",
        spec.name,
        spec.sensors.len(),
        spec.duration,
        spec.seed
    );
    let result = match mode {
        Mode::Lockstep => run_lockstep(&spec),
        Mode::Realtime => run_realtime(
            &spec,
            &RealtimeOptions {
                endpoint,
                ..RealtimeOptions::default()
            },
        ),
    };
    let metrics = match result {
        Ok(m) => m,
        Err(e) => return harness_exit(&e),
    };
    if let Err(e) = emit_report(&metrics, out) {
        return harness_exit(&e);
    }
    print_summary(&metrics);
    println!("wrote {}", out.display());
    let mut ok = true;
    for c in check_run(&metrics, &spec, matches!(mode, Mode::Realtime)) {
        println!(
            "{} {}: {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_BOUND)
    }
}

fn cmd_broker(config: &Path, host: IpAddr, port: u16) -> ExitCode {
    let cfg = match BrokerConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let broker = match &cfg.data_dir {
        Some(dir) => Broker::with_store(cfg.channels.clone(), dir),
        None => Broker::new(cfg.channels.clone()),
    };
    let broker = match broker {
        Ok(b) => Arc::new(b),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let addr = SocketAddr::new(host, port);
    let server = match ciot::bind(addr, broker, Arc::new(SystemClock)) {
        Ok(s) => s,
        Err(e @ ServerError::AddrInUse(_)) => {
            eprintln!("error: {e}; pick another --port");
            return ExitCode::from(EXIT_RUNTIME);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    println!(
        "serving {} channel(s) on {}",
        cfg.channels.len(),
        server.endpoint()
    );
    match server.wait() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn cmd_replay(csv: &Path) -> ExitCode {
    let report = match replay(csv) {
        Ok(r) => r,
        Err(
            e @ (ReplayError::Schema(_) | ReplayError::Version { .. } | ReplayError::Summary(_)),
        ) => {
            eprintln!("{}: {e}", csv.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    print!("{}", report.summary.to_json());
    match report.matches() {
        None => {
            println!("no summary.json next to the trace; nothing to compare");
            ExitCode::SUCCESS
        }
        Some(true) => {
            println!("summary.json matches");
            ExitCode::SUCCESS
        }
        Some(false) => {
            eprintln!("recomputed summary differs from summary.json");
            ExitCode::from(EXIT_BOUND)
        }
    }
}

fn cmd_validate(scenario: &Path) -> ExitCode {
    match load_scenario(scenario) {
        Ok(spec) => {
            println!(
                "{}: ok ({} sensors, {} s at {} s ticks)",
                scenario.display(),
                spec.sensors.len(),
                spec.duration,
                spec.tick
            );
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FENCEWIRE_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            mode,
            seed,
            out,
            endpoint,
        } => cmd_run(&scenario, mode, seed, &out, endpoint),
        Command::Broker { config, port, host } => cmd_broker(&config, host, port),
        Command::Replay { csv } => cmd_replay(&csv),
        Command::Validate { scenario } => cmd_validate(&scenario),
    }
}
