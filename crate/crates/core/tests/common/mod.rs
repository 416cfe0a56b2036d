//! Reference list model of a rate-limited channel, shared by the oracle
//! tests and the acceptance suite.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use fencewire::ciot::wire::{self, WireResponse};
use fencewire::ciot::{Broker, ChannelConfig, FieldSet, FieldSlot};
use fencewire::time::Timestamp;

pub const WRITE_KEY: &str = "WKEY";
pub const READ_KEY: &str = "RKEY";

/// Entry id, created_at in whole seconds, field values.
pub type ModelEntry = (u64, i64, Vec<(u8, String)>);

/// Reference model: an append-only list plus the last accepted instant.
pub struct Model {
    pub min_interval_us: i64,
    pub entries: Vec<ModelEntry>,
    pub last_accepted_us: Option<i64>,
}

impl Model {
    pub fn new(min_interval: f64) -> Self {
        Model {
            min_interval_us: (min_interval * 1e6) as i64,
            entries: vec![],
            last_accepted_us: None,
        }
    }

    pub fn write(&mut self, key: &str, fields: &[(u8, String)], now_us: i64) -> (u16, String) {
        if key != WRITE_KEY {
            return (401, "error_auth".into());
        }
        if fields.is_empty() {
            return (400, "error_bad_request".into());
        }
        if let Some(last) = self.last_accepted_us {
            if now_us - last < self.min_interval_us {
                return (200, "0".into());
            }
        }
        let id = self.entries.len() as u64 + 1;
        let secs = now_us.div_euclid(1_000_000);
        let created = self.entries.last().map_or(secs, |e| e.1.max(secs));
        self.entries.push((id, created, fields.to_vec()));
        self.last_accepted_us = Some(now_us);
        (200, id.to_string())
    }

    fn entry_string(e: &ModelEntry) -> String {
        let ts = chrono::DateTime::from_timestamp(e.1, 0)
            .unwrap()
            .format("%Y-%m-%dT%H:%M:%SZ");
        let mut s = format!(r#"{{"created_at":"{ts}","entry_id":{}"#, e.0);
        let mut fields = e.2.clone();
        fields.sort();
        for (slot, v) in fields {
            s.push_str(&format!(r#","field{slot}":{}"#, Value::String(v)));
        }
        s.push('}');
        s
    }

    pub fn last(&self, key: &str) -> (u16, String) {
        if key != READ_KEY {
            return (401, r#"{"error":"auth"}"#.into());
        }
        match self.entries.last() {
            None => (404, r#"{"error":"empty"}"#.into()),
            Some(e) => (200, Self::entry_string(e)),
        }
    }

    pub fn feed(&self, key: &str, n: usize) -> (u16, Value) {
        if key != READ_KEY {
            return (401, json!({"error": "auth"}));
        }
        let start = self.entries.len().saturating_sub(n);
        let feeds: Vec<Value> = self.entries[start..]
            .iter()
            .map(|e| serde_json::from_str(&Self::entry_string(e)).unwrap())
            .collect();
        (
            200,
            json!({
                "channel": {
                    "id": 1,
                    "name": "oracle",
                    "field1": "distance",
                    "last_entry_id": self.entries.last().map(|e| e.0),
                },
                "feeds": feeds,
            }),
        )
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Write {
        dt_ms: i64,
        good_key: bool,
        fields: Vec<(u8, String)>,
    },
    Last {
        good_key: bool,
    },
    Feed {
        n: usize,
    },
}

pub fn random_op(rng: &mut StdRng) -> Op {
    match rng.random_range(0..10) {
        0..=5 => {
            let dt_ms = match rng.random_range(0..6) {
                0 => 0,
                1 => 999,
                2 => 1000,
                3 => 1001,
                4 => 15_000,
                _ => rng.random_range(0..4000),
            };
            let n = rng.random_range(0..4);
            let fields = (0..n)
                .map(|_| {
                    (
                        rng.random_range(1..=8u8),
                        format!("{:.2}", rng.random_range(0..500) as f64 / 100.0),
                    )
                })
                .collect::<std::collections::BTreeMap<_, _>>()
                .into_iter()
                .collect();
            Op::Write {
                dt_ms,
                good_key: rng.random_bool(0.95),
                fields,
            }
        }
        6..=7 => Op::Last {
            good_key: rng.random_bool(0.95),
        },
        _ => Op::Feed {
            n: rng.random_range(1..6),
        },
    }
}

pub fn schedule(rng: &mut StdRng) -> (f64, Vec<Op>) {
    let min = [0.0, 1.0, 15.0][rng.random_range(0..3)];
    let len = rng.random_range(1..25);
    (min, (0..len).map(|_| random_op(rng)).collect())
}

pub fn config(min: f64) -> ChannelConfig {
    let mut c = ChannelConfig::new(1, WRITE_KEY, READ_KEY).with_min_write_interval(min);
    c.name = "oracle".into();
    c.field_names
        .insert(FieldSlot::new(1).unwrap(), "distance".into());
    c
}

pub fn field_set(fields: &[(u8, String)]) -> FieldSet {
    fields
        .iter()
        .map(|(s, v)| (FieldSlot::new(*s).unwrap(), v.clone()))
        .collect()
}

/// What a batch of in-process schedules exercised.
#[derive(Debug, Default)]
pub struct OracleStats {
    pub schedules: usize,
    pub ops: usize,
    pub rejections: usize,
    pub feeds: usize,
}

/// Replays `count` random schedules against a fresh broker each and the
/// model, comparing wire responses. Returns the first mismatch.
pub fn run_in_process(seed: u64, count: usize) -> Result<OracleStats, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut stats = OracleStats::default();
    for n in 0..count {
        let (min, ops) = schedule(&mut rng);
        let broker = Broker::new(vec![config(min)]).map_err(|e| e.to_string())?;
        let mut model = Model::new(min);
        let mut now_us = Timestamp::SIM_EPOCH.as_micros();
        stats.schedules += 1;
        for (k, op) in ops.iter().enumerate() {
            stats.ops += 1;
            let ctx = || format!("schedule {n} op {k}: {op:?}");
            match op {
                Op::Write {
                    dt_ms,
                    good_key,
                    fields,
                } => {
                    now_us += dt_ms * 1000;
                    let key = if *good_key { WRITE_KEY } else { "nope" };
                    let got = wire::update_response(&broker.write(
                        key,
                        &field_set(fields),
                        Timestamp::from_micros(now_us),
                    ));
                    let want = model.write(key, fields, now_us);
                    if want.1 == "0" {
                        stats.rejections += 1;
                    }
                    same_text(&got, &want).map_err(|e| format!("{}: {e}", ctx()))?;
                }
                Op::Last { good_key } => {
                    let key = if *good_key { READ_KEY } else { "nope" };
                    let got = wire::last_response(&broker.read_last(1, key));
                    same_text(&got, &model.last(key)).map_err(|e| format!("{}: {e}", ctx()))?;
                }
                Op::Feed { n } => {
                    stats.feeds += 1;
                    let got = broker
                        .read_feed(1, READ_KEY, *n)
                        .map(|f| (config(min), broker.last_entry_id(1), f));
                    let got = wire::feed_response(&got);
                    let want = model.feed(READ_KEY, *n);
                    let v: Value =
                        serde_json::from_str(&got.body).map_err(|e| format!("{}: {e}", ctx()))?;
                    if (got.status, &v) != (want.0, &want.1) {
                        return Err(format!(
                            "{}: got {} {v}, want {} {}",
                            ctx(),
                            got.status,
                            want.0,
                            want.1
                        ));
                    }
                    let ids: Vec<u64> = v["feeds"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .filter_map(|e| e["entry_id"].as_u64())
                        .collect();
                    if !ids.windows(2).all(|w| w[0] < w[1]) {
                        return Err(format!("{}: feed not ascending {ids:?}", ctx()));
                    }
                }
            }
        }
    }
    Ok(stats)
}

fn same_text(got: &WireResponse, want: &(u16, String)) -> Result<(), String> {
    if (got.status, got.body.as_str()) == (want.0, want.1.as_str()) {
        Ok(())
    } else {
        Err(format!(
            "got {} {:?}, want {} {:?}",
            got.status, got.body, want.0, want.1
        ))
    }
}
