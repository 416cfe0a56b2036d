//! Proximity fence for a speed-scalable robot arm, mediated by a cloud
//! telemetry channel.
//!
//! Sensor nodes publish quantized distances to a ThingSpeak-compatible
//! channel ([`ciot`]); a polling supervisor ([`supervisor`]) reads the
//! newest entry, fuses the fence, and scales or stops the robot
//! ([`robot`]). The [`harness`] runs the whole loop either in deterministic
//! lockstep or in real time over loopback HTTP.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ciot;
pub mod harness;
pub mod robot;
pub mod safety;
pub mod sensor;
pub mod supervisor;
pub mod time;
