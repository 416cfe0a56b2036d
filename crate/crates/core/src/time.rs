//! Timestamps and clocks.
//!
//! All simulated and wall-clock instants are carried as whole microseconds
//! since the Unix epoch so that schedule arithmetic (rate limits, tick
//! divisibility, second truncation) is exact.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

pub const MICROS_PER_SEC: i64 = 1_000_000;

/// Converts a duration in seconds to whole microseconds, rounding to nearest.
pub fn secs_to_micros(secs: f64) -> i64 {
    (secs * MICROS_PER_SEC as f64).round() as i64
}

pub fn micros_to_secs(us: i64) -> f64 {
    us as f64 / MICROS_PER_SEC as f64
}

/// A UTC instant with microsecond resolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    /// 2021-01-01T00:00:00Z, the origin used by lockstep runs.
    pub const SIM_EPOCH: Timestamp = Timestamp(1_609_459_200 * MICROS_PER_SEC);

    pub const fn from_micros(us: i64) -> Self {
        Timestamp(us)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp(secs_to_micros(secs))
    }

    pub fn as_secs_f64(self) -> f64 {
        micros_to_secs(self.0)
    }

    pub fn now() -> Self {
        let d = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before 1970");
        Timestamp(d.as_micros() as i64)
    }

    /// Floors to the whole second, as stored on the wire.
    pub fn truncate_to_secs(self) -> Self {
        Timestamp(self.0.div_euclid(MICROS_PER_SEC) * MICROS_PER_SEC)
    }

    pub fn add_micros(self, us: i64) -> Self {
        Timestamp(self.0 + us)
    }

    pub fn add_secs(self, secs: f64) -> Self {
        self.add_micros(secs_to_micros(secs))
    }

    /// Signed `self - earlier` in microseconds.
    pub fn micros_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        micros_to_secs(self.micros_since(earlier))
    }

    /// `YYYY-MM-DDThh:mm:ssZ`
    pub fn to_wire(self) -> String {
        let secs = self.0.div_euclid(MICROS_PER_SEC);
        let dt = DateTime::<Utc>::from_timestamp(secs, 0).expect("timestamp out of range");
        dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }

    pub fn parse_wire(s: &str) -> Option<Self> {
        let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%SZ").ok()?;
        Some(Timestamp(naive.and_utc().timestamp() * MICROS_PER_SEC))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_wire())
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Manually advanced clock for lockstep runs and tests.
#[derive(Debug)]
pub struct SimClock {
    now_us: AtomicI64,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock {
            now_us: AtomicI64::new(start.as_micros()),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.now_us.store(t.as_micros(), Ordering::SeqCst);
    }

    pub fn advance_micros(&self, us: i64) {
        self.now_us.fetch_add(us, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now_us.load(Ordering::SeqCst))
    }
}

/// Wall-clock time anchored at a run origin and advanced by the monotonic
/// clock, so every component of a real-time run shares one time base.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    origin: Timestamp,
    started: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        RunClock {
            origin: Timestamp::now(),
            started: Instant::now(),
        }
    }

    pub fn origin(&self) -> Timestamp {
        self.origin
    }

    pub fn started(&self) -> Instant {
        self.started
    }

    pub fn elapsed_micros(&self) -> i64 {
        self.started.elapsed().as_micros() as i64
    }
}

impl Clock for RunClock {
    fn now(&self) -> Timestamp {
        self.origin.add_micros(self.elapsed_micros())
    }
}
