//! Content-addressed artifact store.
//!
//! Objects live at `<root>/objects/<sha256-hex>` and are immutable once
//! written. Retrieval re-hashes the bytes and fails on mismatch, so
//! corruption or tampering is detected at read time.

use crate::canon::Digest;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("object {0} not present in store")]
    Missing(String),
    #[error("object {digest} corrupt: content hashes to {actual}")]
    Corrupt { digest: String, actual: String },
}

/// Filesystem-backed content-addressed store.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, digest: &Digest) -> PathBuf {
        self.root.join("objects").join(digest.as_hex())
    }

    /// Store bytes, returning their digest. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<Digest, StoreError> {
        let digest = Digest::of_bytes(bytes);
        let path = self.object_path(&digest);
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(digest)
    }

    pub fn has(&self, digest: &Digest) -> bool {
        self.object_path(digest).exists()
    }

    /// Fetch and verify an object.
    pub fn get(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        let path = self.object_path(digest);
        if !path.exists() {
            return Err(StoreError::Missing(digest.as_hex().to_string()));
        }
        let bytes = fs::read(&path)?;
        let actual = Digest::of_bytes(&bytes);
        if &actual != digest {
            return Err(StoreError::Corrupt {
                digest: digest.as_hex().to_string(),
                actual: actual.as_hex().to_string(),
            });
        }
        Ok(bytes)
    }

    /// Fetch without integrity verification. Used by the reproduction
    /// harness, which wants to observe a mismatch rather than fail on it.
    pub fn get_unverified(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        let path = self.object_path(digest);
        if !path.exists() {
            return Err(StoreError::Missing(digest.as_hex().to_string()));
        }
        Ok(fs::read(&path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = store.put(b"hello").unwrap();
        assert!(store.has(&d));
        assert_eq!(store.get(&d).unwrap(), b"hello");
        // idempotent
        let d2 = store.put(b"hello").unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn mutation_is_detected_at_read() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let d = store.put(b"sealed evidence").unwrap();
        let path = dir.path().join("objects").join(d.as_hex());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        match store.get(&d) {
            Err(StoreError::Corrupt { .. }) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
