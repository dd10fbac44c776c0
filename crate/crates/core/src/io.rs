//! Line-oriented record formats and the number formatting shared by every
//! file this crate writes.
//!
//! All floats are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fs::{self, File};
use std::io::{self as stdio, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter};
use thiserror::Error;

/// serde_json formatter that prints floats with 17 significant digits.
#[derive(Debug, Default, Clone, Copy)]
pub struct PreciseFormatter;

impl Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> stdio::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> stdio::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn write_null<W: ?Sized + Write>(&mut self, writer: &mut W) -> stdio::Result<()> {
        CompactFormatter.write_null(writer)
    }
}

/// Compact JSON with precise floats.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter);
    value
        .serialize(&mut ser)
        .expect("in-memory serialization of plain data cannot fail");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

/// Serializes each item on its own line.
pub fn to_json_lines<'a, T, I>(items: I) -> String
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = String::new();
    for item in items {
        out.push_str(&to_json_string(item));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: stdio::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Reads one JSON document per non-blank line.
pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| RecordError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            path: display.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Debug, Error)]
#[error("atomic write to {path}: {source}")]
pub struct AtomicWriteError {
    path: String,
    #[source]
    source: stdio::Error,
}

impl From<AtomicWriteError> for stdio::Error {
    fn from(err: AtomicWriteError) -> Self {
        stdio::Error::new(err.source.kind(), err.to_string())
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`. Readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), AtomicWriteError> {
    let wrap = |source| AtomicWriteError {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(wrap)?,
    };
    fs::create_dir_all(&dir).map_err(wrap)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.flush().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

/// Upstream prediction line: `{"x": int, "probs": [floats]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub x: u64,
    pub probs: Vec<f64>,
}

/// Watermarked output line, soft or hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WatermarkedLine {
    Soft { x: u64, probs: Vec<f64>, selected: bool },
    Hard { x: u64, label: u64, selected: bool },
}

/// Probe line: `{"x": int, "probs": [...]}` or `{"x": int, "label": int}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLine {
    pub x: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u64>,
}
