//! Content-addressed blob store, in memory or backed by a directory.
//!
//! The store also hands out temporary files (used for connection spill) and
//! counts every file it creates, so callers can assert that a run stayed off
//! the disk.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::value::BlobRef;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("blob {digest} failed integrity check")]
    Corrupt { digest: String },
    #[error("blob store io: {0}")]
    Io(#[from] io::Error),
}

enum Backing {
    Memory(Mutex<HashMap<String, Vec<u8>>>),
    Dir(PathBuf),
}

pub struct BlobStore {
    backing: Backing,
    temp_dir: PathBuf,
    files_created: AtomicU64,
    temp_seq: AtomicU64,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl BlobStore {
    /// Blobs kept in memory; temporary files go to the system temp directory.
    pub fn in_memory() -> Self {
        BlobStore {
            backing: Backing::Memory(Mutex::new(HashMap::new())),
            temp_dir: std::env::temp_dir(),
            files_created: AtomicU64::new(0),
            temp_seq: AtomicU64::new(0),
        }
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BlobError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("tmp"))?;
        Ok(BlobStore {
            temp_dir: dir.join("tmp"),
            backing: Backing::Dir(dir),
            files_created: AtomicU64::new(0),
            temp_seq: AtomicU64::new(0),
        })
    }

    /// Backing directory of an on-disk store.
    pub fn dir(&self) -> Option<&Path> {
        match &self.backing {
            Backing::Dir(d) => Some(d),
            Backing::Memory(_) => None,
        }
    }

    /// Number of files this store has created since it was opened.
    pub fn files_created(&self) -> u64 {
        self.files_created.load(Ordering::SeqCst)
    }

    fn blob_path(dir: &Path, digest: &str) -> PathBuf {
        dir.join(&digest[..2]).join(digest)
    }

    pub fn put(&self, bytes: &[u8]) -> Result<BlobRef, BlobError> {
        let digest = digest_bytes(bytes);
        match &self.backing {
            Backing::Memory(m) => {
                m.lock().unwrap().entry(digest.clone()).or_insert_with(|| bytes.to_vec());
            }
            Backing::Dir(dir) => {
                let path = Self::blob_path(dir, &digest);
                if !path.exists() {
                    fs::create_dir_all(path.parent().unwrap())?;
                    let tmp = path.with_extension("part");
                    fs::write(&tmp, bytes)?;
                    fs::rename(&tmp, &path)?;
                    self.files_created.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
        Ok(BlobRef { digest, len: bytes.len() as u64 })
    }

    pub fn get(&self, digest: &str) -> Result<Vec<u8>, BlobError> {
        let bytes = match &self.backing {
            Backing::Memory(m) => m
                .lock()
                .unwrap()
                .get(digest)
                .cloned()
                .ok_or_else(|| BlobError::NotFound(digest.to_string()))?,
            Backing::Dir(dir) => {
                if digest.len() < 2 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(BlobError::NotFound(digest.to_string()));
                }
                match fs::read(Self::blob_path(dir, digest)) {
                    Ok(b) => b,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {
                        return Err(BlobError::NotFound(digest.to_string()))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        if digest_bytes(&bytes) != digest {
            return Err(BlobError::Corrupt { digest: digest.to_string() });
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &str) -> bool {
        match &self.backing {
            Backing::Memory(m) => m.lock().unwrap().contains_key(digest),
            Backing::Dir(dir) => digest.len() > 2 && Self::blob_path(dir, digest).exists(),
        }
    }

    /// Create a fresh temporary file owned by the caller. Counted as a created file.
    pub fn create_temp(&self, prefix: &str) -> Result<(PathBuf, fs::File), BlobError> {
        fs::create_dir_all(&self.temp_dir)?;
        let n = self.temp_seq.fetch_add(1, Ordering::SeqCst);
        let path = self.temp_dir.join(format!("{prefix}-{}-{n}.spill", std::process::id()));
        let file = fs::OpenOptions::new().create(true).truncate(true).read(true).write(true).open(&path)?;
        self.files_created.fetch_add(1, Ordering::SeqCst);
        Ok((path, file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_round_trip_and_digest() {
        let store = BlobStore::in_memory();
        let r = store.put(b"hello").unwrap();
        assert_eq!(r.len, 5);
        assert_eq!(store.get(&r.digest).unwrap(), b"hello");
        assert_eq!(store.files_created(), 0);
        assert!(matches!(store.get("00"), Err(BlobError::NotFound(_))));
    }

    #[test]
    fn dir_store_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let r = store.put(b"abc").unwrap();
        store.put(b"abc").unwrap();
        assert_eq!(store.files_created(), 1);
        let path = BlobStore::blob_path(dir.path(), &r.digest);
        fs::write(&path, b"abd").unwrap();
        assert!(matches!(store.get(&r.digest), Err(BlobError::Corrupt { .. })));
    }
}
