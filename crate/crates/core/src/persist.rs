//! Durable state for the stateful modules.
//!
//! Every mutation is journaled as a full-record upsert, so restoring is a
//! replay of the snapshot followed by the journal. The backend only has to
//! provide an ordered append log; per-record atomicity is enforced by the
//! owning module before the record reaches the journal.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::authz::{AuthorizationCode, ClientApp, RefreshTokenRecord};
use crate::keys::StoredKey;
use crate::revocation::RevocationEntry;
use crate::scopes::ScopeEntry;
use crate::token_store::ReferenceTokenRecord;
use crate::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("corrupt record at {path}:{line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StoreRecord {
    Key {
        key: StoredKey,
        key_set_version: u64,
    },
    Client(ClientApp),
    AuthorizationCode(AuthorizationCode),
    Refresh(RefreshTokenRecord),
    RefreshPurged {
        client_id: String,
    },
    Reference(ReferenceTokenRecord),
    /// `version` is the digest version after this entry applied.
    Revocation {
        entry: RevocationEntry,
        version: u64,
    },
    RevocationGc {
        before: Timestamp,
        version: u64,
    },
    Scope(ScopeEntry),
}

/// Ordered append log with snapshot compaction.
pub trait Backend: Send + Sync {
    fn append(&self, record: &StoreRecord) -> Result<(), StoreError>;

    /// Snapshot records followed by every record appended since.
    fn load(&self) -> Result<Vec<StoreRecord>, StoreError>;

    /// Replaces the snapshot with `snapshot` and truncates the journal.
    fn compact(&self, snapshot: &[StoreRecord]) -> Result<(), StoreError>;
}

/// In-process backend. Survives a [`crate::Platform`] being dropped and
/// reopened as long as the backend itself is shared.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    records: Mutex<Vec<StoreRecord>>,
    unavailable: AtomicBool,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every subsequent call fail, for exercising error paths.
    pub fn set_unavailable(&self, unavailable: bool) {
        self.unavailable.store(unavailable, Ordering::SeqCst);
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.unavailable.load(Ordering::SeqCst) {
            Err(StoreError::Unavailable("memory backend disabled".into()))
        } else {
            Ok(())
        }
    }
}

impl Backend for MemoryBackend {
    fn append(&self, record: &StoreRecord) -> Result<(), StoreError> {
        self.check()?;
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }

    fn load(&self) -> Result<Vec<StoreRecord>, StoreError> {
        self.check()?;
        Ok(self.records.lock().unwrap().clone())
    }

    fn compact(&self, snapshot: &[StoreRecord]) -> Result<(), StoreError> {
        self.check()?;
        *self.records.lock().unwrap() = snapshot.to_vec();
        Ok(())
    }
}

/// JSON-lines journal plus a snapshot file inside one directory.
#[derive(Debug)]
pub struct FileBackend {
    dir: PathBuf,
    journal: Mutex<File>,
}

const JOURNAL: &str = "journal.jsonl";
const SNAPSHOT: &str = "snapshot.jsonl";

impl FileBackend {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(JOURNAL))?;
        Ok(Self {
            dir,
            journal: Mutex::new(journal),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_file(path: &Path) -> Result<Vec<StoreRecord>, StoreError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let lines = BufReader::new(file)
            .lines()
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(rec) => out.push(rec),
                // A torn final line means the process died mid-append; the
                // operation it belonged to never returned success.
                Err(_) if i == last => break,
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Backend for FileBackend {
    fn append(&self, record: &StoreRecord) -> Result<(), StoreError> {
        let mut line =
            serde_json::to_vec(record).map_err(|e| StoreError::Unavailable(e.to_string()))?;
        line.push(b'\n');
        let mut journal = self.journal.lock().unwrap();
        journal.write_all(&line)?;
        journal.flush()?;
        journal.sync_data()?;
        Ok(())
    }

    fn load(&self) -> Result<Vec<StoreRecord>, StoreError> {
        let _guard = self.journal.lock().unwrap();
        let mut records = Self::read_file(&self.dir.join(SNAPSHOT))?;
        records.extend(Self::read_file(&self.dir.join(JOURNAL))?);
        Ok(records)
    }

    fn compact(&self, snapshot: &[StoreRecord]) -> Result<(), StoreError> {
        let mut journal = self.journal.lock().unwrap();
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            for rec in snapshot {
                let line = serde_json::to_string(rec)
                    .map_err(|e| StoreError::Unavailable(e.to_string()))?;
                writeln!(f, "{line}")?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        let fresh = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.dir.join(JOURNAL))?;
        fresh.sync_all()?;
        *journal = OpenOptions::new()
            .append(true)
            .open(self.dir.join(JOURNAL))?;
        Ok(())
    }
}
