use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use calib_core::env::{EnvKind, FeatureId};
use calib_core::oracle::Label;
use calib_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::teacher::Checkpoint;

/// One line of a session's append-only log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session: String,
        env: EnvKind,
        feature: FeatureId,
        query_seed: u64,
        model_seed: u64,
        /// Checkpoints in the order their models are listed.
        order: Vec<usize>,
    },
    Label {
        index: usize,
        label: Label,
    },
    Train {
        checkpoint: usize,
    },
}

pub struct SessionLog {
    pub path: PathBuf,
    file: File,
}

impl SessionLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create_new(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(SessionLog { path: path.to_path_buf(), file })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(SessionLog { path: path.to_path_buf(), file })
    }

    /// Appends one event and syncs it to disk before returning.
    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<Event>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ModelStatus {
    Pending,
    Running,
    Done,
    Failed { message: String },
}

/// A checkpoint model, possibly still training. Once trained the result is
/// set exactly once and read without locking.
pub struct ModelSlot {
    pub id: String,
    pub session: String,
    pub checkpoint: usize,
    pub status: Mutex<ModelStatus>,
    pub result: OnceLock<Arc<Checkpoint>>,
}

impl ModelSlot {
    pub fn new(id: String, session: String, checkpoint: usize) -> Self {
        ModelSlot {
            id,
            session,
            checkpoint,
            status: Mutex::new(ModelStatus::Pending),
            result: OnceLock::new(),
        }
    }

    pub fn status(&self) -> ModelStatus {
        if self.result.get().is_some() {
            return ModelStatus::Done;
        }
        self.status.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn set_status(&self, s: ModelStatus) {
        *self.status.lock().unwrap_or_else(|e| e.into_inner()) = s;
    }
}

/// In-memory state of one session. Mutated only while holding its lock,
/// and every mutation is logged first.
pub struct Session {
    pub id: String,
    pub labels: Vec<Label>,
    pub order: Vec<usize>,
    pub models: Vec<Arc<ModelSlot>>,
    pub log: SessionLog,
}

impl Session {
    pub fn slot(&self, checkpoint: usize) -> Option<&Arc<ModelSlot>> {
        self.models.iter().find(|m| m.checkpoint == checkpoint)
    }
}
