//! Append-only JSON Lines record of every live backend call.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedgerOutcome {
    Ok,
    Error,
}

/// One live call (cache hits are not ledgered).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub ts_ms: u64,
    pub backend_id: String,
    pub digest: String,
    pub latency_ms: u64,
    pub retries: u32,
    pub outcome: LedgerOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LedgerEntry {
    pub fn ok(backend_id: &str, digest: &str, latency_ms: u64, retries: u32) -> Self {
        LedgerEntry {
            ts_ms: wall_ms(),
            backend_id: backend_id.to_string(),
            digest: digest.to_string(),
            latency_ms,
            retries,
            outcome: LedgerOutcome::Ok,
            error: None,
        }
    }

    pub fn error(backend_id: &str, digest: &str, message: String) -> Self {
        LedgerEntry {
            ts_ms: wall_ms(),
            backend_id: backend_id.to_string(),
            digest: digest.to_string(),
            latency_ms: 0,
            retries: 0,
            outcome: LedgerOutcome::Error,
            error: Some(message),
        }
    }
}

fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Append-only call log; safe for concurrent recording.
pub struct RunLedger {
    path: PathBuf,
    file: Mutex<File>,
}

impl RunLedger {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(RunLedger {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, entry: &LedgerEntry) -> io::Result<()> {
        let line = serde_json::to_string(entry)?;
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}")?;
        file.flush()
    }

    /// Reads a ledger back; skips blank lines, fails on malformed ones.
    pub fn read_entries(path: &Path) -> io::Result<Vec<LedgerEntry>> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn records_append_and_read_back() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.ledger.jsonl");
        let ledger = RunLedger::open(&path).unwrap();
        ledger.record(&LedgerEntry::ok("mock", "d1", 12, 0)).unwrap();
        ledger
            .record(&LedgerEntry::error("mock", "d2", "boom".into()))
            .unwrap();
        let entries = RunLedger::read_entries(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].digest, "d1");
        assert_eq!(entries[0].outcome, LedgerOutcome::Ok);
        assert_eq!(entries[1].outcome, LedgerOutcome::Error);
        assert_eq!(entries[1].error.as_deref(), Some("boom"));
    }

    #[test]
    fn reopen_appends_rather_than_truncates() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.ledger.jsonl");
        RunLedger::open(&path)
            .unwrap()
            .record(&LedgerEntry::ok("a", "d1", 1, 0))
            .unwrap();
        RunLedger::open(&path)
            .unwrap()
            .record(&LedgerEntry::ok("a", "d2", 1, 1))
            .unwrap();
        let entries = RunLedger::read_entries(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].retries, 1);
    }

    #[test]
    fn concurrent_records_produce_valid_lines() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.ledger.jsonl");
        let ledger = std::sync::Arc::new(RunLedger::open(&path).unwrap());
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let ledger = ledger.clone();
                std::thread::spawn(move || {
                    for i in 0..25 {
                        ledger
                            .record(&LedgerEntry::ok("mock", &format!("t{t}-{i}"), 0, 0))
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(RunLedger::read_entries(&path).unwrap().len(), 100);
    }
}
