//! Simulated ultrasonic proximity nodes.
//!
//! Each node measures the planar distance from its mount point to the
//! object, adds Gaussian noise, quantizes, and publishes the reading plus a
//! precise sample-time field to the channel on a fixed cadence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ciot::{ChannelClient, CiotError, EntryId, FieldSet, FieldSlot, WriteOutcome};
use crate::safety::{quantize_range, quantum_decimals, RangeReading, SensorPlacement};
use crate::time::Timestamp;

/// Wire value for an out-of-range reading.
pub const OUT_OF_RANGE_WIRE: &str = "-1";
pub const DEFAULT_NOISE_SIGMA: f64 = 0.005;
pub const DEFAULT_WRITE_INTERVAL: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("sensor {sensor_id}: {message}")]
    InvalidConfig { sensor_id: u32, message: String },
}

/// Object position in polar coordinates about the robot base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub range: f64,
    /// Degrees.
    pub bearing: f64,
    /// Negative while approaching.
    pub radial_speed: f64,
}

/// Planar distance between the object and the sensor's mount point.
pub fn true_distance(object: &ObjectState, placement: &SensorPlacement) -> f64 {
    let r = object.range;
    let m = placement.mount_radius;
    let dtheta = (object.bearing - placement.bearing).to_radians();
    (r * r + m * m - 2.0 * r * m * dtheta.cos()).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorNodeConfig {
    pub placement: SensorPlacement,
    /// Seconds between samples.
    pub write_interval: f64,
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    /// Seconds from sample to arrival at the broker.
    pub uplink_delay: f64,
    pub quantum: f64,
    pub max_range: f64,
    /// Skip publishing a reading identical to the last published one.
    #[serde(default)]
    pub suppress_redundant: bool,
}

impl SensorNodeConfig {
    pub fn new(placement: SensorPlacement) -> Self {
        SensorNodeConfig {
            placement,
            write_interval: DEFAULT_WRITE_INTERVAL,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            dropout_prob: 0.0,
            uplink_delay: 0.0,
            quantum: crate::safety::DEFAULT_QUANTUM,
            max_range: crate::safety::DEFAULT_MAX_RANGE,
            suppress_redundant: false,
        }
    }

    /// `sharing_writers` nodes publish into the same channel, so each one's
    /// cadence must leave room for the others under the channel's limit.
    pub fn validate(
        &self,
        min_write_interval: f64,
        sharing_writers: usize,
    ) -> Result<(), SensorError> {
        let fail = |message: String| SensorError::InvalidConfig {
            sensor_id: self.placement.sensor_id,
            message,
        };
        if !(self.write_interval > 0.0) {
            return Err(fail(format!(
                "write_interval must be > 0, got {}",
                self.write_interval
            )));
        }
        let needed = min_write_interval * sharing_writers.max(1) as f64;
        if self.write_interval + 1e-12 < needed {
            return Err(fail(format!(
                "write_interval {} s is below the channel limit {} s x {} writers",
                self.write_interval,
                min_write_interval,
                sharing_writers.max(1)
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(fail("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(fail("dropout_prob must be in [0, 1]".into()));
        }
        if !(self.uplink_delay >= 0.0) {
            return Err(fail("uplink_delay must be >= 0".into()));
        }
        if !(self.quantum > 0.0) || !(self.max_range > 0.0) {
            return Err(fail("quantum and max_range must be > 0".into()));
        }
        Ok(())
    }
}

pub type NodeRng = ChaCha8Rng;

/// Per-node generator: the run seed selects the key, the sensor id the
/// stream, so nodes draw independent sequences.
pub fn node_rng(seed: u64, sensor_id: u32) -> NodeRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sensor_id as u64);
    rng
}

/// One noisy, quantized observation. Consumes exactly one normal draw.
pub fn sample(node: &SensorNodeConfig, object: &ObjectState, rng: &mut NodeRng) -> RangeReading {
    let noise = Normal::new(0.0, node.noise_sigma)
        .expect("noise_sigma validated")
        .sample(rng);
    let measured = (true_distance(object, &node.placement) + noise).max(0.0);
    quantize_range(measured, node.quantum, node.max_range).expect("node config validated")
}

pub fn encode_reading(reading: RangeReading, quantum: f64) -> String {
    match reading {
        RangeReading::InRange(d) => format!("{:.*}", quantum_decimals(quantum), d),
        RangeReading::OutOfRange => OUT_OF_RANGE_WIRE.to_string(),
    }
}

/// Seconds since the run origin, microsecond precision.
pub fn encode_sample_time(sampled_at: Timestamp, origin: Timestamp) -> String {
    format!("{:.6}", sampled_at.secs_since(origin))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PublishOutcome {
    Published(EntryId),
    Dropped {
        transport_error: bool,
    },
    RateLimited,
    /// Redundant report skipped; only with `suppress_redundant`.
    Suppressed,
}

impl PublishOutcome {
    /// One-letter code used in run traces.
    pub fn code(self) -> char {
        match self {
            PublishOutcome::Published(_) => 'P',
            PublishOutcome::Dropped {
                transport_error: false,
            } => 'D',
            PublishOutcome::Dropped {
                transport_error: true,
            } => 'E',
            PublishOutcome::RateLimited => 'R',
            PublishOutcome::Suppressed => 'S',
        }
    }
}

/// What a node produced at a sampling instant, before delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub reading: RangeReading,
    pub sampled_at: Timestamp,
    /// `None` when the sample was dropped or suppressed at the node.
    pub frame: Option<FieldSet>,
    pub local_outcome: Option<PublishOutcome>,
}

/// A sensor node bound to its channel slots and random stream.
pub struct SensorNode {
    config: SensorNodeConfig,
    rng: NodeRng,
    slot: FieldSlot,
    time_slot: FieldSlot,
    origin: Timestamp,
    last_published: Option<RangeReading>,
}

impl SensorNode {
    pub fn new(
        config: SensorNodeConfig,
        slot: FieldSlot,
        time_slot: FieldSlot,
        origin: Timestamp,
        seed: u64,
    ) -> Self {
        let rng = node_rng(seed, config.placement.sensor_id);
        SensorNode {
            config,
            rng,
            slot,
            time_slot,
            origin,
            last_published: None,
        }
    }

    pub fn config(&self) -> &SensorNodeConfig {
        &self.config
    }

    pub fn sensor_id(&self) -> u32 {
        self.config.placement.sensor_id
    }

    /// Samples and decides dropout/suppression. Draw order per call: one
    /// normal for noise, then one uniform for dropout.
    pub fn prepare(&mut self, object: &ObjectState, now: Timestamp) -> Sampled {
        let reading = sample(&self.config, object, &mut self.rng);
        let dropped = self.rng.random::<f64>() < self.config.dropout_prob;
        let mut out = Sampled {
            reading,
            sampled_at: now,
            frame: None,
            local_outcome: None,
        };
        if dropped {
            out.local_outcome = Some(PublishOutcome::Dropped {
                transport_error: false,
            });
        } else if self.config.suppress_redundant && self.last_published == Some(reading) {
            out.local_outcome = Some(PublishOutcome::Suppressed);
        } else {
            let mut fields = FieldSet::new();
            fields.insert(self.slot, encode_reading(reading, self.config.quantum));
            fields.insert(self.time_slot, encode_sample_time(now, self.origin));
            out.frame = Some(fields);
        }
        out
    }

    /// Sends a prepared frame and maps the broker's answer.
    pub fn deliver<C: ChannelClient + ?Sized>(
        &mut self,
        sampled: &Sampled,
        client: &mut C,
    ) -> PublishOutcome {
        let Some(fields) = &sampled.frame else {
            return sampled.local_outcome.unwrap_or(PublishOutcome::Dropped {
                transport_error: false,
            });
        };
        match client.publish(fields) {
            Ok(WriteOutcome::Accepted(id)) => {
                self.last_published = Some(sampled.reading);
                PublishOutcome::Published(id)
            }
            Ok(WriteOutcome::Rejected) => PublishOutcome::RateLimited,
            Err(e) => {
                log_publish_error(self.sensor_id(), &e);
                PublishOutcome::Dropped {
                    transport_error: true,
                }
            }
        }
    }

    /// Samples and publishes immediately. Callers modelling uplink delay use
    /// [`prepare`](Self::prepare) and [`deliver`](Self::deliver) separately.
    pub fn tick<C: ChannelClient + ?Sized>(
        &mut self,
        object: &ObjectState,
        client: &mut C,
        now: Timestamp,
    ) -> (Sampled, PublishOutcome) {
        let sampled = self.prepare(object, now);
        let outcome = self.deliver(&sampled, client);
        (sampled, outcome)
    }
}

fn log_publish_error(sensor_id: u32, e: &CiotError) {
    if e.is_transport() {
        log::debug!("sensor {sensor_id}: publish failed: {e}");
    } else {
        log::warn!("sensor {sensor_id}: publish refused: {e}");
    }
}
