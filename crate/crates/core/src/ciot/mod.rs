//! Cloud channel service: a ThingSpeak-compatible broker and its client.
//!
//! A channel is an append-only log of entries, each carrying up to eight
//! decimal-string field values. Sensor nodes write through `POST /update`,
//! the supervisor reads `feeds/last.json`.

mod broker;
mod client;
mod config;
mod server;
mod store;
pub mod wire;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

pub use broker::{Broker, RefinedView};
pub use client::{ChannelAccess, ChannelClient, HttpClient, LocalClient};
pub use config::BrokerConfig;
pub use server::{bind, serve, BoundServer, ServerError};

pub const MAX_FIELDS: u8 = 8;
pub const DEFAULT_MIN_WRITE_INTERVAL: f64 = 1.0;
/// Write interval of the hosted service's free tier.
pub const FREE_TIER_MIN_WRITE_INTERVAL: f64 = 15.0;

pub type ChannelId = u64;
pub type EntryId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CiotError {
    #[error("authentication failed")]
    Auth,
    #[error("channel {0} not found")]
    NotFound(ChannelId),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid channel configuration: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("transport error talking to {endpoint}: {message}")]
    Transport {
        endpoint: String,
        message: String,
        /// Whether repeating the same request may succeed.
        retryable: bool,
        /// Suggested wait before retrying, seconds.
        retry_after: Option<f64>,
    },
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl CiotError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CiotError::Transport { .. })
    }
}

/// Field slot number, 1..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FieldSlot(u8);

impl FieldSlot {
    pub fn new(n: u8) -> Result<Self, CiotError> {
        if (1..=MAX_FIELDS).contains(&n) {
            Ok(FieldSlot(n))
        } else {
            Err(CiotError::BadRequest(format!(
                "field slot {n} outside 1..=8"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// `field<N>`
    pub fn key(self) -> String {
        format!("field{}", self.0)
    }

    /// Parses `field<N>`; `None` for keys that are not field keys at all.
    pub fn parse_key(key: &str) -> Option<Result<Self, CiotError>> {
        let digits = key.strip_prefix("field")?;
        Some(
            digits
                .parse::<u8>()
                .map_err(|_| CiotError::BadRequest(format!("malformed field key {key:?}")))
                .and_then(FieldSlot::new),
        )
    }
}

impl TryFrom<u8> for FieldSlot {
    type Error = CiotError;
    fn try_from(n: u8) -> Result<Self, Self::Error> {
        FieldSlot::new(n)
    }
}

impl From<FieldSlot> for u8 {
    fn from(s: FieldSlot) -> u8 {
        s.0
    }
}

impl fmt::Display for FieldSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "field{}", self.0)
    }
}

pub type FieldSet = BTreeMap<FieldSlot, String>;

/// One record of a channel's log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub entry_id: EntryId,
    /// Whole-second resolution.
    pub created_at: Timestamp,
    pub fields: FieldSet,
}

impl ChannelEntry {
    pub fn field(&self, slot: FieldSlot) -> Option<&str> {
        self.fields.get(&slot).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Accepted(EntryId),
    /// Rate limited; the wire body is `0`.
    Rejected,
}

impl WriteOutcome {
    pub fn entry_id(self) -> Option<EntryId> {
        match self {
            WriteOutcome::Accepted(id) => Some(id),
            WriteOutcome::Rejected => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub channel_id: ChannelId,
    #[serde(default)]
    pub name: String,
    pub write_key: String,
    pub read_key: String,
    /// Seconds between accepted writes.
    #[serde(default = "default_min_write_interval")]
    pub min_write_interval: f64,
    /// Field labels keyed by slot.
    #[serde(default)]
    pub field_names: BTreeMap<FieldSlot, String>,
}

fn default_min_write_interval() -> f64 {
    DEFAULT_MIN_WRITE_INTERVAL
}

impl ChannelConfig {
    pub fn new(channel_id: ChannelId, write_key: &str, read_key: &str) -> Self {
        ChannelConfig {
            channel_id,
            name: String::new(),
            write_key: write_key.to_string(),
            read_key: read_key.to_string(),
            min_write_interval: DEFAULT_MIN_WRITE_INTERVAL,
            field_names: BTreeMap::new(),
        }
    }

    pub fn with_min_write_interval(mut self, secs: f64) -> Self {
        self.min_write_interval = secs;
        self
    }

    pub fn validate(&self) -> Result<(), CiotError> {
        if self.channel_id == 0 {
            return Err(CiotError::Config("channel_id must be positive".into()));
        }
        if !(self.min_write_interval >= 0.0) || !self.min_write_interval.is_finite() {
            return Err(CiotError::Config(format!(
                "channel {}: min_write_interval must be >= 0",
                self.channel_id
            )));
        }
        if self.write_key.is_empty() || self.read_key.is_empty() {
            return Err(CiotError::Config(format!(
                "channel {}: keys must be non-empty",
                self.channel_id
            )));
        }
        if self.field_names.len() > MAX_FIELDS as usize {
            return Err(CiotError::Config(format!(
                "channel {}: at most 8 field slots",
                self.channel_id
            )));
        }
        Ok(())
    }
}
