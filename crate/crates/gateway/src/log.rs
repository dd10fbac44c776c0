use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// A scalar for single requests, an array for batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            OneOrMany::One(_) => 1,
            OneOrMany::Many(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One answered request. `seq` is the token's counter value for the first
/// item; a batch of n items uses `seq..seq + n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
    pub token: String,
    pub x: OneOrMany<u64>,
    pub selected: OneOrMany<bool>,
    pub seq: u64,
}

impl LogLine {
    /// `(x, selected)` for every item in the request.
    pub fn items(&self) -> Vec<(u64, bool)> {
        self.x.to_vec().into_iter().zip(self.selected.to_vec()).collect()
    }
}

/// Append-only query log plus the per-token request counters recovered from it.
#[derive(Debug)]
pub struct QueryLog {
    file: File,
    counters: HashMap<String, u64>,
}

impl QueryLog {
    /// Opens (or creates) the log and rebuilds counters from its lines. A
    /// trailing partial line left by a crash is cut off.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let mut counters: HashMap<String, u64> = HashMap::new();
        for (i, raw) in text[..complete].lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: LogLine = serde_json::from_str(raw).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), i + 1),
                )
            })?;
            let next = line.seq + line.x.len() as u64;
            let c = counters.entry(line.token).or_default();
            *c = (*c).max(next);
        }
        Ok(Self { file, counters })
    }

    pub fn next_seq(&self, token: &str) -> u64 {
        self.counters.get(token).copied().unwrap_or(0)
    }

    /// Writes one line and advances the token's counter by the batch size.
    /// The counter is untouched if the write fails.
    pub fn append(&mut self, line: &LogLine) -> io::Result<()> {
        let mut text = serde_json::to_string(line).map_err(io::Error::other)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()?;
        self.counters
            .insert(line.token.clone(), line.seq + line.x.len() as u64);
        Ok(())
    }
}

/// Reads every line of a query log.
pub fn read_query_log(path: &Path) -> io::Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
