//! Append-only JSON Lines store of ranking transcripts, one record per list.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::EntityId;
use crate::ranker::{RankOutcome, RankedList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub list_id: String,
    pub query_id: String,
    pub request: Value,
    pub response: Option<String>,
    pub degraded: bool,
    pub repairs: usize,
    pub latency_ms: u64,
    /// Final positions, best first.
    pub ranking: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TranscriptRecord {
    pub fn from_outcome(query_id: &str, outcome: RankOutcome) -> Self {
        Self {
            list_id: outcome.ranked.list_id,
            query_id: query_id.to_owned(),
            request: outcome.request,
            response: outcome.response,
            degraded: outcome.degraded,
            repairs: outcome.repairs,
            latency_ms: outcome.latency_ms,
            ranking: outcome.ranked.positions,
            error: outcome.error,
        }
    }

    pub fn ranked(&self) -> RankedList {
        RankedList {
            list_id: self.list_id.clone(),
            positions: self.ranking.clone(),
        }
    }
}

/// Reads every complete record. A torn final line (interrupted write) is
/// ignored; a later record for the same list replaces an earlier one.
pub fn load(path: &Path) -> std::io::Result<BTreeMap<String, TranscriptRecord>> {
    let mut records = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(records),
        Err(e) => return Err(e),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TranscriptRecord>(line) {
            Ok(record) => {
                records.insert(record.list_id.clone(), record);
            }
            Err(e) if i == last => warn!("{}: ignoring torn final record: {e}", path.display()),
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(records)
}

/// Appends records; each record is written with a single `write_all` of a
/// complete line while holding the lock.
pub struct TranscriptStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl TranscriptStore {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        // A torn tail would otherwise be glued to the next record.
        if let Ok(bytes) = std::fs::read(&path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let cut = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                std::fs::write(&path, &bytes[..cut])?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &TranscriptRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line)?;
        file.flush()
    }
}
