use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::RwLock;

use super::store::ChannelStore;
use super::{
    ChannelConfig, ChannelEntry, ChannelId, CiotError, EntryId, FieldSet, FieldSlot, WriteOutcome,
};
use crate::time::{secs_to_micros, Timestamp};

struct ChannelLog {
    entries: Vec<ChannelEntry>,
    last_accepted: Option<Timestamp>,
    store: Option<ChannelStore>,
}

struct Channel {
    config: ChannelConfig,
    min_interval_us: i64,
    // Writers take the exclusive lock, so each channel has a single logical
    // writer; readers always see a prefix of the log.
    log: RwLock<ChannelLog>,
}

/// Moving averages over each field slot's most recent numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedView {
    pub window: usize,
    /// Non-numeric values passed over while collecting the window.
    pub skipped: usize,
    pub means: BTreeMap<FieldSlot, f64>,
    /// The raw latest entry the averages end at.
    pub latest: Option<ChannelEntry>,
}

/// In-memory channel broker with optional on-disk persistence.
pub struct Broker {
    channels: BTreeMap<ChannelId, Channel>,
    by_write_key: HashMap<String, ChannelId>,
}

impl Broker {
    pub fn new(configs: Vec<ChannelConfig>) -> Result<Self, CiotError> {
        Self::build(configs, None)
    }

    /// A broker whose channels persist under `dir`; existing logs are replayed.
    pub fn with_store(configs: Vec<ChannelConfig>, dir: &Path) -> Result<Self, CiotError> {
        Self::build(configs, Some(dir))
    }

    fn build(configs: Vec<ChannelConfig>, dir: Option<&Path>) -> Result<Self, CiotError> {
        let mut channels = BTreeMap::new();
        let mut by_write_key = HashMap::new();
        for config in configs {
            config.validate()?;
            let id = config.channel_id;
            if channels.contains_key(&id) {
                return Err(CiotError::Config(format!("duplicate channel id {id}")));
            }
            if by_write_key.insert(config.write_key.clone(), id).is_some() {
                return Err(CiotError::Config(format!(
                    "channel {id}: write key shared with another channel"
                )));
            }
            let (entries, last_accepted, store) = match dir {
                Some(dir) => {
                    let (store, replayed) = ChannelStore::open(dir, id)?;
                    log::info!(
                        "channel {id}: replayed {} entries from {}",
                        replayed.entries.len(),
                        store.path().display()
                    );
                    (replayed.entries, replayed.last_accepted, Some(store))
                }
                None => (Vec::new(), None, None),
            };
            channels.insert(
                id,
                Channel {
                    min_interval_us: secs_to_micros(config.min_write_interval),
                    config,
                    log: RwLock::new(ChannelLog {
                        entries,
                        last_accepted,
                        store,
                    }),
                },
            );
        }
        Ok(Broker {
            channels,
            by_write_key,
        })
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.channels.keys().copied()
    }

    pub fn channel_config(&self, channel_id: ChannelId) -> Option<&ChannelConfig> {
        self.channels.get(&channel_id).map(|c| &c.config)
    }

    /// Appends an entry unless the channel's minimum write interval has not
    /// elapsed since the last accepted write.
    pub fn write(
        &self,
        write_key: &str,
        fields: &FieldSet,
        now: Timestamp,
    ) -> Result<WriteOutcome, CiotError> {
        let id = self.by_write_key.get(write_key).ok_or(CiotError::Auth)?;
        if fields.is_empty() {
            return Err(CiotError::BadRequest("no field values".into()));
        }
        let channel = &self.channels[id];
        let mut log = channel.log.write().expect("channel lock poisoned");
        if let Some(last) = log.last_accepted {
            if now.micros_since(last) < channel.min_interval_us {
                return Ok(WriteOutcome::Rejected);
            }
        }
        let entry_id: EntryId = log.entries.last().map_or(1, |e| e.entry_id + 1);
        // Keep created_at non-decreasing even if the caller's clock steps back.
        let mut created_at = now.truncate_to_secs();
        if let Some(prev) = log.entries.last() {
            created_at = created_at.max(prev.created_at);
        }
        let entry = ChannelEntry {
            entry_id,
            created_at,
            fields: fields.clone(),
        };
        if let Some(store) = log.store.as_mut() {
            store.append(&entry, now)?;
        }
        log.entries.push(entry);
        log.last_accepted = Some(now);
        Ok(WriteOutcome::Accepted(entry_id))
    }

    fn authorized(&self, channel_id: ChannelId, read_key: &str) -> Result<&Channel, CiotError> {
        let channel = self
            .channels
            .get(&channel_id)
            .ok_or(CiotError::NotFound(channel_id))?;
        if channel.config.read_key != read_key {
            return Err(CiotError::Auth);
        }
        Ok(channel)
    }

    pub fn authorize_read(&self, channel_id: ChannelId, read_key: &str) -> Result<(), CiotError> {
        self.authorized(channel_id, read_key).map(|_| ())
    }

    pub fn read_last(
        &self,
        channel_id: ChannelId,
        read_key: &str,
    ) -> Result<Option<ChannelEntry>, CiotError> {
        let channel = self.authorized(channel_id, read_key)?;
        let log = channel.log.read().expect("channel lock poisoned");
        Ok(log.entries.last().cloned())
    }

    /// The last `results` entries in ascending entry id order.
    pub fn read_feed(
        &self,
        channel_id: ChannelId,
        read_key: &str,
        results: usize,
    ) -> Result<Vec<ChannelEntry>, CiotError> {
        if results == 0 {
            return Err(CiotError::BadRequest("results must be >= 1".into()));
        }
        let channel = self.authorized(channel_id, read_key)?;
        let log = channel.log.read().expect("channel lock poisoned");
        let start = log.entries.len().saturating_sub(results);
        Ok(log.entries[start..].to_vec())
    }

    /// Every entry; used by reports and tests.
    pub fn full_log(&self, channel_id: ChannelId) -> Result<Vec<ChannelEntry>, CiotError> {
        let channel = self
            .channels
            .get(&channel_id)
            .ok_or(CiotError::NotFound(channel_id))?;
        let log = channel.log.read().expect("channel lock poisoned");
        Ok(log.entries.clone())
    }

    pub fn last_entry_id(&self, channel_id: ChannelId) -> Option<EntryId> {
        let channel = self.channels.get(&channel_id)?;
        let log = channel.log.read().expect("channel lock poisoned");
        log.entries.last().map(|e| e.entry_id)
    }

    /// Trailing moving average of the last `window` numeric values of each
    /// field slot. Read-only: the raw log is never touched.
    pub fn refine(&self, channel_id: ChannelId, window: usize) -> Result<RefinedView, CiotError> {
        if window == 0 {
            return Err(CiotError::BadRequest("window must be >= 1".into()));
        }
        let channel = self
            .channels
            .get(&channel_id)
            .ok_or(CiotError::NotFound(channel_id))?;
        let log = channel.log.read().expect("channel lock poisoned");

        let mut sums: BTreeMap<FieldSlot, (f64, usize)> = BTreeMap::new();
        let mut skipped = 0;
        for entry in log.entries.iter().rev() {
            for (slot, raw) in &entry.fields {
                let acc = sums.entry(*slot).or_insert((0.0, 0));
                if acc.1 == window {
                    continue;
                }
                match raw.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        acc.0 += v;
                        acc.1 += 1;
                    }
                    _ => skipped += 1,
                }
            }
            if !sums.is_empty() && sums.values().all(|(_, n)| *n == window) {
                break;
            }
        }
        let means = sums
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(slot, (sum, n))| (slot, sum / n as f64))
            .collect();
        Ok(RefinedView {
            window,
            skipped,
            means,
            latest: log.entries.last().cloned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(n: u8) -> FieldSlot {
        FieldSlot::new(n).unwrap()
    }

    fn fields(v: &str) -> FieldSet {
        [(slot(1), v.to_string())].into_iter().collect()
    }

    fn broker() -> Broker {
        Broker::new(vec![ChannelConfig::new(1, "W", "R")]).unwrap()
    }

    fn at(secs: f64) -> Timestamp {
        Timestamp::SIM_EPOCH.add_secs(secs)
    }

    #[test]
    fn write_examples() {
        let b = broker();
        assert_eq!(
            b.write("W", &fields("1"), at(0.0)),
            Ok(WriteOutcome::Accepted(1))
        );
        assert_eq!(
            b.write("W", &fields("1"), at(0.5)),
            Ok(WriteOutcome::Rejected)
        );
        assert_eq!(
            b.write("W", &fields("1"), at(1.5)),
            Ok(WriteOutcome::Accepted(2))
        );
        assert_eq!(b.write("X", &fields("1"), at(9.0)), Err(CiotError::Auth));
        assert!(matches!(
            b.write("W", &FieldSet::new(), at(9.0)),
            Err(CiotError::BadRequest(_))
        ));
    }

    #[test]
    fn created_at_is_truncated() {
        let b = broker();
        b.write("W", &fields("1"), at(3.75)).unwrap();
        assert_eq!(b.read_last(1, "R").unwrap().unwrap().created_at, at(3.0));
    }

    #[test]
    fn read_last_examples() {
        let b = broker();
        assert_eq!(b.read_last(1, "R"), Ok(None));
        b.write("W", &fields("1"), at(0.0)).unwrap();
        b.write("W", &fields("2"), at(1.0)).unwrap();
        assert_eq!(b.read_last(1, "R").unwrap().unwrap().entry_id, 2);
        assert_eq!(b.read_last(1, "bad"), Err(CiotError::Auth));
        assert_eq!(b.read_last(2, "R"), Err(CiotError::NotFound(2)));
    }

    #[test]
    fn read_feed_examples() {
        let b = broker();
        assert_eq!(b.read_feed(1, "R", 3), Ok(vec![]));
        b.write("W", &fields("1"), at(0.0)).unwrap();
        let one = b.read_feed(1, "R", 5).unwrap();
        assert_eq!(one.iter().map(|e| e.entry_id).collect::<Vec<_>>(), vec![1]);
        b.write("W", &fields("2"), at(1.0)).unwrap();
        b.write("W", &fields("3"), at(2.0)).unwrap();
        let two = b.read_feed(1, "R", 2).unwrap();
        assert_eq!(
            two.iter().map(|e| e.entry_id).collect::<Vec<_>>(),
            vec![2, 3]
        );
        assert!(b.read_feed(1, "R", 0).is_err());
    }

    #[test]
    fn refine_examples() {
        let b = broker();
        b.write("W", &fields("5.0"), at(0.0)).unwrap();
        let v = b.refine(1, 3).unwrap();
        assert_eq!(v.means[&slot(1)], 5.0);

        let b = broker();
        for (i, v) in ["1.0", "2.0", "3.0"].iter().enumerate() {
            b.write("W", &fields(v), at(i as f64)).unwrap();
        }
        assert_eq!(b.refine(1, 3).unwrap().means[&slot(1)], 2.0);
        assert_eq!(b.refine(1, 1).unwrap().means[&slot(1)], 3.0);
        assert_eq!(b.read_feed(1, "R", 10).unwrap().len(), 3);
    }

    #[test]
    fn refine_skips_non_numeric() {
        let b = broker();
        b.write("W", &fields("2.0"), at(0.0)).unwrap();
        b.write("W", &fields("abc"), at(1.0)).unwrap();
        b.write("W", &fields("4.0"), at(2.0)).unwrap();
        let v = b.refine(1, 2).unwrap();
        assert_eq!(v.means[&slot(1)], 3.0);
        assert_eq!(v.skipped, 1);
        assert_eq!(v.latest.unwrap().entry_id, 3);
    }

    #[test]
    fn config_validation() {
        assert!(Broker::new(vec![
            ChannelConfig::new(1, "W", "R"),
            ChannelConfig::new(1, "W2", "R")
        ])
        .is_err());
        assert!(Broker::new(vec![
            ChannelConfig::new(1, "W", "R"),
            ChannelConfig::new(2, "W", "R")
        ])
        .is_err());
        assert!(Broker::new(vec![ChannelConfig::new(0, "W", "R")]).is_err());
        assert!(Broker::new(vec![
            ChannelConfig::new(1, "W", "R").with_min_write_interval(-1.0)
        ])
        .is_err());
    }

    #[test]
    fn persistence_replays_log_and_rate_limit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = vec![ChannelConfig::new(1, "W", "R")];
        {
            let b = Broker::with_store(cfg.clone(), dir.path()).unwrap();
            b.write("W", &fields("1.00"), at(0.0)).unwrap();
            b.write("W", &fields("2.00"), at(1.2)).unwrap();
        }
        let b = Broker::with_store(cfg, dir.path()).unwrap();
        let feed = b.read_feed(1, "R", 10).unwrap();
        assert_eq!(feed.len(), 2);
        assert_eq!(feed[1].fields[&slot(1)], "2.00");
        // The replayed last-accepted instant still gates the next write.
        assert_eq!(
            b.write("W", &fields("3"), at(1.7)),
            Ok(WriteOutcome::Rejected)
        );
        assert_eq!(
            b.write("W", &fields("3"), at(2.2)),
            Ok(WriteOutcome::Accepted(3))
        );
    }

    #[test]
    fn persistence_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = vec![ChannelConfig::new(4, "W", "R")];
        {
            let b = Broker::with_store(cfg.clone(), dir.path()).unwrap();
            b.write("W", &fields("1.00"), at(0.0)).unwrap();
        }
        let path = ChannelStore::path_for(dir.path(), 4);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"entry_id\":2,\"crea");
        std::fs::write(&path, text).unwrap();
        let b = Broker::with_store(cfg, dir.path()).unwrap();
        assert_eq!(b.last_entry_id(4), Some(1));
    }
}
