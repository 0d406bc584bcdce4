//! One monitoring session: the live monitor, its log, and the read-only view
//! handed to readers.

use crate::store::{Event, SessionLog};
use seqgraph::engine::TrialState;
use seqgraph::{DesignFile, MonitorOptions, StageObservation, StageReport, TrialMonitor};
use serde::Serialize;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Immutable snapshot for readers. Replaced wholesale after each mutation.
#[derive(Debug, Clone, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub hypotheses: Vec<String>,
    pub num_stages: usize,
    pub state: TrialState,
    pub options: MonitorOptions,
    pub reports: Vec<StageReport>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub monitor: TrialMonitor,
    log: SessionLog,
}

#[derive(Debug)]
pub enum SessionError {
    Engine(seqgraph::Error),
    Io(io::Error),
}

impl From<seqgraph::Error> for SessionError {
    fn from(e: seqgraph::Error) -> Self {
        SessionError::Engine(e)
    }
}

impl From<io::Error> for SessionError {
    fn from(e: io::Error) -> Self {
        SessionError::Io(e)
    }
}

impl Session {
    /// Validates the design, writes the creation record and returns the session.
    pub fn create(
        dir: &Path,
        id: String,
        design: DesignFile,
        options: MonitorOptions,
        idempotency_key: Option<String>,
    ) -> Result<Self, SessionError> {
        let monitor = TrialMonitor::new(design.clone().validate()?, options)?;
        let mut log = SessionLog::create(dir, &id)?;
        let ev = Event::Created {
            session_id: id.clone(),
            design,
            options,
            idempotency_key,
        };
        if let Err(e) = log.append(&ev) {
            let _ = std::fs::remove_file(log.path());
            return Err(e.into());
        }
        Ok(Session { id, monitor, log })
    }

    /// Rebuilds a session from its log. Returns the idempotency key it was created with.
    pub fn replay(path: &Path) -> Result<(Self, Option<String>), SessionError> {
        let (log, events) = SessionLog::open(path)?;
        let mut it = events.into_iter();
        let Some(Event::Created {
            session_id,
            design,
            options,
            idempotency_key,
        }) = it.next()
        else {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("{}: no creation record", path.display())).into());
        };
        let mut monitor = TrialMonitor::new(design.validate()?, options)?;
        for ev in it {
            match ev {
                Event::Stage { observations, report } => monitor.restore_stage(&observations, report)?,
                Event::Decision { stop } => {
                    monitor.decide(&stop)?;
                }
                Event::Created { .. } => {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "repeated creation record").into());
                }
            }
        }
        Ok((
            Session {
                id: session_id,
                monitor,
                log,
            },
            idempotency_key,
        ))
    }

    /// Analyses a stage on a copy, logs it, then commits.
    pub fn submit_stage(&mut self, obs: Vec<StageObservation>, deadline: Option<Instant>) -> Result<StageReport, SessionError> {
        let mut next = self.monitor.clone();
        let report = next.submit_stage(&obs, deadline)?.clone();
        self.log.append(&Event::Stage {
            observations: obs,
            report: report.clone(),
        })?;
        self.monitor = next;
        Ok(report)
    }

    pub fn decide(&mut self, stop: Vec<usize>) -> Result<Vec<usize>, SessionError> {
        let mut next = self.monitor.clone();
        let all = next.decide(&stop)?;
        self.log.append(&Event::Decision { stop })?;
        self.monitor = next;
        Ok(all)
    }

    pub fn view(&self) -> Arc<SessionView> {
        let d = self.monitor.design();
        Arc::new(SessionView {
            session_id: self.id.clone(),
            hypotheses: d.names().to_vec(),
            num_stages: d.num_stages(),
            state: self.monitor.state().clone(),
            options: self.monitor.options(),
            reports: self.monitor.reports().to_vec(),
        })
    }
}
