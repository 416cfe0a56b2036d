//! Re-derives a run summary from a stored run.csv.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::safety::{is_quantized, RangeReading};
use crate::sensor::OUT_OF_RANGE_WIRE;
use crate::supervisor::Mode;

use super::metrics::{
    summarize, RunMeta, RunSummary, SensorCell, TickRow, RUN_HEADER_TAG, RUN_SCHEMA_VERSION,
};
use super::report::SUMMARY_JSON;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("run.csv schema_version {found} is not supported (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("run.csv does not match the schema: {0}")]
    Schema(String),
    #[error("summary.json is unreadable: {0}")]
    Summary(String),
}

fn schema(msg: impl Into<String>) -> ReplayError {
    ReplayError::Schema(msg.into())
}

fn parse_meta(line: &str) -> Result<RunMeta, ReplayError> {
    let rest = line
        .strip_prefix(RUN_HEADER_TAG)
        .ok_or_else(|| schema(format!("first line must start with {RUN_HEADER_TAG:?}")))?;
    let mut kv = std::collections::BTreeMap::new();
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| schema(format!("malformed header token {tok:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| schema(format!("header lacks {k}")))
    };
    let version: u32 = get("schema_version")?
        .parse()
        .map_err(|_| schema("schema_version is not an integer"))?;
    if version != RUN_SCHEMA_VERSION {
        return Err(ReplayError::Version {
            found: version,
            expected: RUN_SCHEMA_VERSION,
        });
    }
    let num = |k: &str| -> Result<f64, ReplayError> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| schema(format!("header {k} is not a number")))
    };
    let sensors = get("sensors")?;
    let sensor_ids = if sensors.is_empty() {
        vec![]
    } else {
        sensors
            .split(',')
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| schema("bad sensor id in header"))
            })
            .collect::<Result<_, _>>()?
    };
    Ok(RunMeta {
        schema_version: version,
        tick: num("tick")?,
        duration: num("duration")?,
        rows: get("rows")?
            .parse()
            .map_err(|_| schema("rows is not an integer"))?,
        quantum: num("quantum")?,
        d_stop: num("d_stop")?,
        d_slow: num("d_slow")?,
        envelope_radius: num("envelope_radius")?,
        nominal_speed: num("nominal_speed")?,
        sensor_ids,
    })
}

fn parse_f64(v: &str, line: usize, col: &str) -> Result<f64, ReplayError> {
    v.parse::<f64>()
        .map_err(|_| schema(format!("line {line}: {col} {v:?} is not a number")))
}

fn parse_opt<T: std::str::FromStr>(
    v: &str,
    line: usize,
    col: &str,
) -> Result<Option<T>, ReplayError> {
    if v.is_empty() {
        return Ok(None);
    }
    v.parse::<T>()
        .map(Some)
        .map_err(|_| schema(format!("line {line}: bad {col} {v:?}")))
}

fn parse_reading(v: &str, quantum: f64, line: usize) -> Result<Option<RangeReading>, ReplayError> {
    match v {
        "" => Ok(None),
        OUT_OF_RANGE_WIRE => Ok(Some(RangeReading::OutOfRange)),
        _ => {
            let d = parse_f64(v, line, "measured")?;
            if d >= 0.0 && is_quantized(d, quantum) {
                Ok(Some(RangeReading::InRange(d)))
            } else {
                Err(schema(format!(
                    "line {line}: measured {v:?} is off the {quantum} m grid"
                )))
            }
        }
    }
}

/// Parses a complete run.csv into its metadata and rows.
pub fn parse_run_csv(text: &str) -> Result<(RunMeta, Vec<TickRow>), ReplayError> {
    if !text.ends_with('\n') {
        return Err(schema("file is truncated (no final newline)"));
    }
    let (first, body) = text
        .split_once('\n')
        .ok_or_else(|| schema("missing header"))?;
    let meta = parse_meta(first)?;
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let expected = meta.columns();
    if headers != expected {
        return Err(schema(format!(
            "columns {headers:?} differ from {expected:?}"
        )));
    }
    let n = meta.sensor_ids.len();
    let mut rows = Vec::with_capacity(meta.rows);
    for (i, rec) in reader.records().enumerate() {
        let line = i + 3;
        let rec = rec.map_err(|e| schema(format!("line {line}: {e}")))?;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let mut sensors = Vec::with_capacity(n);
        for s in 0..n {
            let outcome = match f(4 + 2 * s) {
                "" => None,
                o if o.len() == 1 && "PDERS".contains(o) => o.chars().next(),
                o => return Err(schema(format!("line {line}: unknown outcome {o:?}"))),
            };
            sensors.push(SensorCell {
                measured: parse_reading(f(3 + 2 * s), meta.quantum, line)?,
                outcome,
            });
        }
        let base = 3 + 2 * n;
        rows.push(TickRow {
            t: parse_f64(f(0), line, "t")?,
            true_range: parse_f64(f(1), line, "true_range")?,
            bearing: parse_f64(f(2), line, "bearing")?,
            sensors,
            entry_id: parse_opt(f(base), line, "entry_id")?,
            mode: f(base + 1)
                .parse::<Mode>()
                .map_err(|e| schema(format!("line {line}: {e}")))?,
            speed_override: parse_f64(f(base + 2), line, "override")?,
            robot_speed: parse_f64(f(base + 3), line, "robot_speed")?,
            latency_s: parse_opt(f(base + 4), line, "latency_s")?,
        });
    }
    if rows.len() != meta.rows {
        return Err(schema(format!(
            "expected {} rows, found {} (truncated?)",
            meta.rows,
            rows.len()
        )));
    }
    Ok((meta, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub summary: RunSummary,
    /// The summary.json stored next to the trace, if any.
    pub stored: Option<RunSummary>,
}

impl ReplayReport {
    /// `None` when there is nothing to compare against.
    pub fn matches(&self) -> Option<bool> {
        self.stored
            .as_ref()
            .map(|s| serde_json::to_value(s).ok() == serde_json::to_value(&self.summary).ok())
    }
}

pub fn replay_text(text: &str) -> Result<RunSummary, ReplayError> {
    let (meta, rows) = parse_run_csv(text)?;
    Ok(summarize(&meta, &rows))
}

/// Recomputes the summary of `csv_path` and loads the sibling summary.json.
pub fn replay(csv_path: &Path) -> Result<ReplayReport, ReplayError> {
    let text = std::fs::read_to_string(csv_path).map_err(|source| ReplayError::Io {
        path: csv_path.to_path_buf(),
        source,
    })?;
    let summary = replay_text(&text)?;
    let sibling = csv_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(SUMMARY_JSON);
    let stored = match std::fs::read_to_string(&sibling) {
        Ok(s) => Some(serde_json::from_str(&s).map_err(|e| ReplayError::Summary(e.to_string()))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(source) => {
            return Err(ReplayError::Io {
                path: sibling,
                source,
            })
        }
    };
    Ok(ReplayReport { summary, stored })
}
