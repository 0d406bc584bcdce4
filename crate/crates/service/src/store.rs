//! Append-only session logs: one file per session, each record a 4-byte
//! little-endian length followed by a JSON event.

use seqgraph::{DesignFile, MonitorOptions, StageObservation, StageReport};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

/// Everything that changes a session, in the order it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        design: DesignFile,
        options: MonitorOptions,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idempotency_key: Option<String>,
    },
    Stage {
        observations: Vec<StageObservation>,
        report: StageReport,
    },
    /// Requested stops (0-based); automatic stops are recomputed on replay.
    Decision { stop: Vec<usize> },
}

#[derive(Debug)]
pub struct SessionLog {
    file: File,
    path: PathBuf,
}

impl SessionLog {
    pub fn path_for(dir: &Path, session_id: &str) -> PathBuf {
        dir.join(format!("{session_id}.log"))
    }

    /// Creates a new log; fails if one already exists.
    pub fn create(dir: &Path, session_id: &str) -> io::Result<Self> {
        let path = Self::path_for(dir, session_id);
        let file = OpenOptions::new().append(true).create_new(true).open(&path)?;
        Ok(SessionLog { file, path })
    }

    /// Reads every complete record. A torn record at the end (from a crash
    /// during a write) is cut off so later appends start on a clean boundary.
    pub fn open(path: &Path) -> io::Result<(Self, Vec<Event>)> {
        let mut file = OpenOptions::new().read(true).append(true).open(path)?;
        let mut buf = Vec::new();
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut buf)?;
        let mut events = Vec::new();
        let mut pos = 0usize;
        while pos + 4 <= buf.len() {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            if pos + 4 + len > buf.len() {
                break;
            }
            let ev: Event = serde_json::from_slice(&buf[pos + 4..pos + 4 + len])
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
            events.push(ev);
            pos += 4 + len;
        }
        if pos < buf.len() {
            log::warn!("{}: dropping {} bytes of a torn record", path.display(), buf.len() - pos);
            file.set_len(pos as u64)?;
        }
        Ok((
            SessionLog {
                file,
                path: path.to_path_buf(),
            },
            events,
        ))
    }

    pub fn append(&mut self, ev: &Event) -> io::Result<()> {
        let body = serde_json::to_vec(ev).map_err(io::Error::other)?;
        let len = u32::try_from(body.len()).map_err(|_| io::Error::other("record too large"))?;
        let mut rec = Vec::with_capacity(4 + body.len());
        rec.extend_from_slice(&len.to_le_bytes());
        rec.extend_from_slice(&body);
        self.file.write_all(&rec)?;
        self.file.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
