//! Disk cache of model responses, one file per request digest.

use std::fs;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    digest: String,
    raw_text: String,
}

/// Digest-keyed response store. Corrupt or mismatched entries degrade to
/// cache misses with a warning; they never fail a run.
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<String> {
        let path = self.entry_path(digest);
        let content = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&content) {
            Ok(entry) if entry.digest == digest => Some(entry.raw_text),
            Ok(entry) => {
                log::warn!(
                    "cache entry {} claims digest {}; treating as miss",
                    path.display(),
                    entry.digest
                );
                None
            }
            Err(err) => {
                log::warn!("unreadable cache entry {}: {err}; treating as miss", path.display());
                None
            }
        }
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn put(&self, digest: &str, raw_text: &str) -> io::Result<()> {
        let entry = CacheEntry {
            digest: digest.to_string(),
            raw_text: raw_text.to_string(),
        };
        let tmp = self.dir.join(format!(".{digest}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(&tmp, self.entry_path(digest))
    }
}
