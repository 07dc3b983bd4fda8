//! Append-only log of loop transitions (`journal.jsonl`).
//!
//! Each transition writes `begin`, commits the manifest, then writes
//! `commit`. The manifest is the source of truth; the journal records what
//! was attempted so an interrupted transition can be recognized and retried.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Phase;

pub const JOURNAL_FILE: &str = "journal.jsonl";

/// Environment variable naming a journal length at which the process aborts,
/// for crash testing.
pub const CRASH_ENV: &str = "LOOPMARK_CRASH_AFTER_JOURNAL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalEvent {
    Begin,
    Commit,
    /// A transition whose manifest commit landed but whose `commit` line did
    /// not.
    Recovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub event: JournalEvent,
    pub iteration: u32,
    pub from: Option<Phase>,
    pub to: Phase,
    pub at: String,
}

/// What to do once the journal reaches a given length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultInjection {
    #[default]
    Off,
    /// Abort the process, as a kill would.
    AbortAt(usize),
    /// Return an error and write nothing more.
    FailAt(usize),
}

impl FaultInjection {
    pub fn from_env() -> Self {
        std::env::var(CRASH_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .map_or(FaultInjection::Off, FaultInjection::AbortAt)
    }
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    len: usize,
    fault: FaultInjection,
}

/// Raised by [`FaultInjection::FailAt`].
#[derive(Debug)]
pub struct Injected(pub usize);

impl Journal {
    pub fn open(workspace_root: &Path) -> io::Result<Self> {
        let path = workspace_root.join(JOURNAL_FILE);
        drop_torn_tail(&path)?;
        let len = Self::read_path(&path)?.len();
        Ok(Self {
            path,
            len,
            fault: FaultInjection::Off,
        })
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn read_path(path: &Path) -> io::Result<Vec<JournalEntry>> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    pub fn entries(&self) -> io::Result<Vec<JournalEntry>> {
        Self::read_path(&self.path)
    }

    /// The last transition that began and was neither committed nor
    /// recovered.
    pub fn open_transition(&self) -> io::Result<Option<JournalEntry>> {
        let entries = self.entries()?;
        Ok(entries
            .last()
            .filter(|e| e.event == JournalEvent::Begin)
            .cloned())
    }

    pub fn append(
        &mut self,
        event: JournalEvent,
        iteration: u32,
        from: Option<Phase>,
        to: Phase,
        at: String,
    ) -> io::Result<Result<(), Injected>> {
        let entry = JournalEntry {
            seq: self.len as u64 + 1,
            event,
            iteration,
            from,
            to,
            at,
        };
        let mut line = serde_json::to_string(&entry).expect("journal entry serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_all()?;
        self.len += 1;
        Ok(match self.fault {
            FaultInjection::AbortAt(n) if self.len == n => {
                tracing::error!(entries = n, "injected crash");
                std::process::abort()
            }
            FaultInjection::FailAt(n) if self.len == n => Err(Injected(n)),
            _ => Ok(()),
        })
    }
}

/// Cuts a partial last line left by a crash mid-write.
fn drop_torn_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.last().is_some_and(|b| *b != b'\n') {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_and_detects_open_transitions() {
        let tmp = tempfile::tempdir().unwrap();
        let mut j = Journal::open(tmp.path()).unwrap();
        assert!(j.is_empty());
        j.append(JournalEvent::Begin, 1, Some(Phase::Seeded), Phase::Augmented, "t".into())
            .unwrap()
            .unwrap();
        assert_eq!(j.open_transition().unwrap().unwrap().to, Phase::Augmented);
        j.append(JournalEvent::Commit, 1, Some(Phase::Seeded), Phase::Augmented, "t".into())
            .unwrap()
            .unwrap();
        assert!(j.open_transition().unwrap().is_none());
        let reopened = Journal::open(tmp.path()).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.entries().unwrap()[1].seq, 2);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let tmp = tempfile::tempdir().unwrap();
        let mut j = Journal::open(tmp.path()).unwrap();
        j.append(JournalEvent::Begin, 1, None, Phase::Seeded, "t".into()).unwrap().unwrap();
        let mut f = OpenOptions::new().append(true).open(tmp.path().join(JOURNAL_FILE)).unwrap();
        f.write_all(b"{\"seq\":2,\"ev").unwrap();
        let mut j = Journal::open(tmp.path()).unwrap();
        assert_eq!(j.len(), 1);
        j.append(JournalEvent::Commit, 1, None, Phase::Seeded, "t".into()).unwrap().unwrap();
        assert_eq!(j.entries().unwrap().len(), 2);
    }

    #[test]
    fn fail_injection_fires_once_at_length() {
        let tmp = tempfile::tempdir().unwrap();
        let mut j = Journal::open(tmp.path()).unwrap().with_fault(FaultInjection::FailAt(2));
        assert!(j.append(JournalEvent::Begin, 1, None, Phase::Seeded, "t".into()).unwrap().is_ok());
        assert!(j.append(JournalEvent::Commit, 1, None, Phase::Seeded, "t".into()).unwrap().is_err());
        assert!(j.append(JournalEvent::Begin, 1, None, Phase::Seeded, "t".into()).unwrap().is_ok());
    }
}
