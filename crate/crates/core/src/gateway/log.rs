//! Append-only JSON Lines detection log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ontology::Verdict;
use crate::types::{AnomalyClass, BoundingBox, CycleState, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub ts_ms: u64,
    pub cycle_index: u64,
    pub cycle_state: CycleState,
    pub predicted_class: AnomalyClass,
    pub probs: [f64; NUM_CLASSES],
    pub bbox: BoundingBox,
    pub verdict: Verdict,
    pub latency_ms: f64,
    pub model_id: String,
}

/// A frame whose processing failed; the loop keeps going.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub ts_ms: u64,
    pub cycle_index: u64,
    pub cycle_state: CycleState,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Detection(DetectionRecord),
    Error(ErrorRecord),
}

impl LogEntry {
    /// One JSON object plus newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log entries serialize");
        s.push('\n');
        s
    }
}

/// Holds the log file open in append mode; each entry is one `write` call.
pub struct LogWriter {
    file: File,
}

impl LogWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LogWriter { file })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        self.file.write_all(entry.to_line().as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn append_entry(entry: &LogEntry, path: impl AsRef<Path>) -> Result<()> {
    LogWriter::open(path)?.append(entry)
}

pub fn append_record(record: &DetectionRecord, path: impl AsRef<Path>) -> Result<()> {
    append_entry(&LogEntry::Detection(record.clone()), path)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogContents {
    pub records: Vec<DetectionRecord>,
    pub errors: Vec<ErrorRecord>,
    /// Lines that were neither record kind.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<LogContents> {
    let mut out = LogContents::default();
    let reader = BufReader::new(File::open(path.as_ref())?);
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<LogEntry>(&line) {
            Ok(LogEntry::Detection(r)) => out.records.push(r),
            Ok(LogEntry::Error(e)) => out.errors.push(e),
            Err(e) => {
                out.skipped += 1;
                out.warnings.push(format!("line {}: skipped ({e})", i + 1));
            }
        }
    }
    Ok(out)
}
