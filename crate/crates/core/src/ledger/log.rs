//! Append-only event file for ledger crash recovery.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AgentRecord, Ledger, LedgerConfig, LedgerError};
use crate::protocol::{to_canonical_json, AgentId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    Register { record: AgentRecord },
    Heartbeat { agent_id: AgentId, sent_at: u64 },
}

impl LedgerEvent {
    pub fn apply(&self, ledger: &mut Ledger) -> Result<(), LedgerError> {
        match self {
            LedgerEvent::Register { record } => ledger.register(record.clone()).map(|_| ()),
            LedgerEvent::Heartbeat { agent_id, sent_at } => {
                ledger.heartbeat(agent_id, *sent_at).map(|_| ())
            }
        }
    }
}

/// One canonical-JSON line per accepted event.
#[derive(Debug)]
pub struct LedgerLog {
    path: PathBuf,
    file: File,
}

impl LedgerLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &LedgerEvent) -> std::io::Result<()> {
        let mut line = to_canonical_json(event)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }

    /// Rebuilds a ledger from the events in `path`. Lines that fail to parse or apply
    /// are skipped with a warning; a torn final line is expected after a crash.
    pub fn replay(path: impl AsRef<Path>, config: LedgerConfig) -> std::io::Result<Ledger> {
        let mut ledger = Ledger::new(config);
        let file = match File::open(path.as_ref()) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ledger),
            Err(e) => return Err(e),
        };
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LedgerEvent>(&line) {
                Ok(ev) => {
                    if let Err(e) = ev.apply(&mut ledger) {
                        tracing::warn!(line = lineno + 1, error = %e, "skipping ledger log event");
                    }
                }
                Err(e) => tracing::warn!(line = lineno + 1, error = %e, "unparseable ledger log line"),
            }
        }
        Ok(ledger)
    }
}
