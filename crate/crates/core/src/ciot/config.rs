use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{ChannelConfig, CiotError, FieldSlot, DEFAULT_MIN_WRITE_INTERVAL};

/// Broker configuration file (TOML).
///
/// ```toml
/// data_dir = "broker-data"      # optional; enables persistence
///
/// [[channels]]
/// channel_id = 1
/// name = "robot fence"
/// write_key = "WRITEKEY"
/// read_key = "READKEY"
/// min_write_interval = 1.0
/// field_names = { field1 = "sensor 1", field8 = "sample time" }
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BrokerConfig {
    pub data_dir: Option<PathBuf>,
    pub channels: Vec<ChannelConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    data_dir: Option<PathBuf>,
    channels: Vec<RawChannel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    channel_id: u64,
    #[serde(default)]
    name: String,
    write_key: String,
    read_key: String,
    min_write_interval: Option<f64>,
    free_tier: Option<bool>,
    #[serde(default)]
    field_names: BTreeMap<String, String>,
}

impl BrokerConfig {
    pub fn from_toml(text: &str) -> Result<Self, CiotError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CiotError::Config(e.to_string()))?;
        let mut channels = Vec::with_capacity(raw.channels.len());
        for ch in raw.channels {
            let min_write_interval = match (ch.min_write_interval, ch.free_tier) {
                (Some(v), _) => v,
                (None, Some(true)) => super::FREE_TIER_MIN_WRITE_INTERVAL,
                _ => DEFAULT_MIN_WRITE_INTERVAL,
            };
            let mut field_names = BTreeMap::new();
            for (k, label) in ch.field_names {
                let slot = match FieldSlot::parse_key(&k) {
                    Some(s) => s,
                    None => k
                        .parse::<u8>()
                        .map_err(|_| {
                            CiotError::Config(format!("field name key {k:?} is not a slot"))
                        })
                        .and_then(|n| {
                            FieldSlot::new(n).map_err(|e| CiotError::Config(e.to_string()))
                        }),
                }
                .map_err(|e| CiotError::Config(e.to_string()))?;
                field_names.insert(slot, label);
            }
            let cfg = ChannelConfig {
                channel_id: ch.channel_id,
                name: ch.name,
                write_key: ch.write_key,
                read_key: ch.read_key,
                min_write_interval,
                field_names,
            };
            cfg.validate()?;
            channels.push(cfg);
        }
        if channels.is_empty() {
            return Err(CiotError::Config("no channels declared".into()));
        }
        Ok(BrokerConfig {
            data_dir: raw.data_dir,
            channels,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CiotError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CiotError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative data directories resolve against the config file.
        if let (Some(dir), Some(parent)) = (cfg.data_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = parent.join(&*dir);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_channels() {
        let cfg = BrokerConfig::from_toml(
            r#"
            [[channels]]
            channel_id = 1
            write_key = "W"
            read_key = "R"
            field_names = { field1 = "s1", 8 = "t" }

            [[channels]]
            channel_id = 2
            write_key = "W2"
            read_key = "R2"
            free_tier = true
            "#,
        )
        .unwrap();
        assert_eq!(cfg.channels.len(), 2);
        assert_eq!(cfg.channels[0].min_write_interval, 1.0);
        assert_eq!(cfg.channels[0].field_names.len(), 2);
        assert_eq!(cfg.channels[1].min_write_interval, 15.0);
        assert_eq!(cfg.data_dir, None);
    }

    #[test]
    fn rejects_bad_slots_and_unknown_keys() {
        assert!(BrokerConfig::from_toml(
            "[[channels]]\nchannel_id = 1\nwrite_key = \"W\"\nread_key = \"R\"\nfield_names = { field9 = \"x\" }\n"
        )
        .is_err());
        assert!(BrokerConfig::from_toml(
            "[[channels]]\nchannel_id = 1\nwrite_key = \"W\"\nread_key = \"R\"\nbogus = 1\n"
        )
        .is_err());
        assert!(BrokerConfig::from_toml("channels = []").is_err());
    }
}
