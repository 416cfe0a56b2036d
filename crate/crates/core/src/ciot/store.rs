//! Append-only channel persistence: one newline-delimited JSON record per
//! accepted write, one file per channel, replayed on startup.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelEntry, ChannelId, CiotError, FieldSet};
use crate::time::Timestamp;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    entry_id: u64,
    created_at: String,
    accepted_at_us: i64,
    fields: FieldSet,
}

pub(crate) struct Replayed {
    pub entries: Vec<ChannelEntry>,
    pub last_accepted: Option<Timestamp>,
}

#[derive(Debug)]
pub(crate) struct ChannelStore {
    path: PathBuf,
    file: File,
}

fn storage(e: impl std::fmt::Display) -> CiotError {
    CiotError::Storage(e.to_string())
}

impl ChannelStore {
    pub fn path_for(dir: &Path, channel_id: ChannelId) -> PathBuf {
        dir.join(format!("channel-{channel_id}.ndjson"))
    }

    /// Opens (creating if needed) the channel's log and replays it.
    pub fn open(dir: &Path, channel_id: ChannelId) -> Result<(Self, Replayed), CiotError> {
        std::fs::create_dir_all(dir).map_err(storage)?;
        let path = Self::path_for(dir, channel_id);
        let (replayed, valid_len) = if path.exists() {
            replay(&path)?
        } else {
            (
                Replayed {
                    entries: Vec::new(),
                    last_accepted: None,
                },
                0,
            )
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(storage)?;
        if file.metadata().map_err(storage)?.len() != valid_len {
            file.set_len(valid_len).map_err(storage)?;
        }
        Ok((ChannelStore { path, file }, replayed))
    }

    pub fn append(
        &mut self,
        entry: &ChannelEntry,
        accepted_at: Timestamp,
    ) -> Result<(), CiotError> {
        let rec = Record {
            entry_id: entry.entry_id,
            created_at: entry.created_at.to_wire(),
            accepted_at_us: accepted_at.as_micros(),
            fields: entry.fields.clone(),
        };
        let mut line = serde_json::to_string(&rec).map_err(storage)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(storage)?;
        self.file.flush().map_err(storage)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Returns the replayed log and the byte length of its valid prefix.
fn replay(path: &Path) -> Result<(Replayed, u64), CiotError> {
    let text = std::fs::read_to_string(path).map_err(storage)?;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut entries: Vec<ChannelEntry> = Vec::with_capacity(lines.len());
    let mut last_accepted = None;
    let mut valid_len = 0u64;
    let n = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            if complete {
                valid_len += line.len() as u64;
            }
            continue;
        }
        let parsed = if complete {
            serde_json::from_str::<Record>(line).map_err(|e| e.to_string())
        } else {
            Err("record not newline-terminated".to_string())
        };
        let rec = match parsed {
            Ok(r) => r,
            // A torn final record from an interrupted append is dropped.
            Err(e) if i + 1 == n => {
                log::warn!("{}: dropping torn final record: {e}", path.display());
                continue;
            }
            Err(e) => return Err(storage(format!("{}:{}: {e}", path.display(), i + 1))),
        };
        let created_at = Timestamp::parse_wire(&rec.created_at)
            .ok_or_else(|| storage(format!("{}:{}: bad created_at", path.display(), i + 1)))?;
        if let Some(prev) = entries.last() {
            if rec.entry_id != prev.entry_id + 1 || created_at < prev.created_at {
                return Err(storage(format!(
                    "{}:{}: entry {} out of order after {}",
                    path.display(),
                    i + 1,
                    rec.entry_id,
                    prev.entry_id
                )));
            }
        }
        last_accepted = Some(Timestamp::from_micros(rec.accepted_at_us));
        valid_len += line.len() as u64;
        entries.push(ChannelEntry {
            entry_id: rec.entry_id,
            created_at,
            fields: rec.fields,
        });
    }
    Ok((
        Replayed {
            entries,
            last_accepted,
        },
        valid_len,
    ))
}
