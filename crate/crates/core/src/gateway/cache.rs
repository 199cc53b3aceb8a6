//! Content-addressed record store: `<root>/<key[..2]>/<key>.json`.
//!
//! Records are written once to a temporary file and renamed into place, so
//! concurrent writers of the same key leave one complete file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::QueryRecord;
use crate::error::{Error, Result};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub key: String,
    pub backend_id: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub seed: u64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct RecordCache {
    root: PathBuf,
}

impl RecordCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RecordCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    fn generation_path(&self, key: &str) -> PathBuf {
        self.root
            .join("generations")
            .join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<QueryRecord>> {
        match self.read(&self.record_path(key))? {
            Some(bytes) => {
                let record: QueryRecord = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Cache(format!("corrupt record {key}: {e}")))?;
                if record.key != key {
                    return Err(Error::Cache(format!("record {key} holds key {}", record.key)));
                }
                Ok(Some(record))
            }
            None => Ok(None),
        }
    }

    /// Raw stored bytes for a key.
    pub fn get_bytes(&self, key: &str) -> Result<Option<Vec<u8>>> {
        self.read(&self.record_path(key))
    }

    pub fn put(&self, record: &QueryRecord) -> Result<()> {
        let mut bytes = serde_json::to_vec(record)?;
        bytes.push(b'\n');
        self.write_atomic(&self.record_path(&record.key), &bytes)
    }

    pub fn get_generation(&self, key: &str) -> Result<Option<GenerationRecord>> {
        match self.read(&self.generation_path(key))? {
            Some(bytes) => Ok(Some(serde_json::from_slice(&bytes).map_err(|e| {
                Error::Cache(format!("corrupt generation record {key}: {e}"))
            })?)),
            None => Ok(None),
        }
    }

    pub fn put_generation(&self, record: &GenerationRecord) -> Result<()> {
        let mut bytes = serde_json::to_vec(record)?;
        bytes.push(b'\n');
        self.write_atomic(&self.generation_path(&record.key), &bytes)
    }

    fn read(&self, path: &Path) -> Result<Option<Vec<u8>>> {
        match fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}
