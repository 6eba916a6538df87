//! Append-only JSONL session log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Assessment,
    Verdict,
    ThresholdChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    /// RFC 3339.
    pub timestamp: String,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// Single-writer event log. Without a path, events are kept in memory only.
#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    events: Vec<SessionEvent>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            events: Vec::new(),
        }
    }

    /// Open (creating if needed) and read back any existing events.
    pub fn open(path: &Path) -> Result<Self> {
        let mut events: Vec<SessionEvent> = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| ServiceError::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| ServiceError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: SessionEvent =
                    serde_json::from_str(&line).map_err(|e| ServiceError::format(path, format!("line {}: {e}", i + 1)))?;
                if events.last().is_some_and(|last| ev.seq <= last.seq) {
                    return Err(ServiceError::format(path, format!("line {}: sequence {} is not increasing", i + 1, ev.seq)));
                }
                events.push(ev);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            events,
        })
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn append(&mut self, kind: EventKind, timestamp: String, payload: serde_json::Value) -> Result<SessionEvent> {
        let ev = SessionEvent {
            seq: self.last_seq() + 1,
            timestamp,
            kind,
            payload,
        };
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&ev).expect("serializable");
            line.push('\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<log>"));
            f.write_all(line.as_bytes()).map_err(|e| ServiceError::io(path, e))?;
            f.flush().map_err(|e| ServiceError::io(path, e))?;
        }
        self.events.push(ev.clone());
        Ok(ev)
    }
}
