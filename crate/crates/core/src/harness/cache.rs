//! Content-addressed stage cache.
//!
//! Entries live at `<dir>/<stage>/<digest>.bin` and carry a SHA-256 of
//! their payload; a mismatch counts as a miss. Writes go through a temp
//! file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bump when any cached payload format changes.
const CACHE_VERSION: u32 = 1;

/// Incremental stage digest: stage name, upstream digests and the
/// canonical JSON of the stage's config subtree.
pub struct DigestBuilder(Sha256);

impl DigestBuilder {
    pub fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(CACHE_VERSION.to_le_bytes());
        let mut b = Self(h);
        b.field(stage.as_bytes());
        b
    }

    fn field(&mut self, bytes: &[u8]) {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        self.field(bytes);
        self
    }

    pub fn upstream(self, digest: &str) -> Self {
        self.bytes(digest.as_bytes())
    }

    pub fn config<T: Serialize>(self, value: &T) -> Result<Self> {
        let json = serde_json::to_vec(value)?;
        Ok(self.bytes(&json))
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, stage: &str, digest: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(stage).join(format!("{digest}.bin")))
    }

    pub fn get(&self, stage: &str, digest: &str) -> Option<Vec<u8>> {
        let path = self.path(stage, digest)?;
        let bytes = fs::read(&path).ok()?;
        if bytes.len() < 32 || Sha256::digest(&bytes[32..]).as_slice() != &bytes[..32] {
            log::warn!("ignoring corrupt cache entry {}", path.display());
            return None;
        }
        Some(bytes[32..].to_vec())
    }

    pub fn put(&self, stage: &str, digest: &str, payload: &[u8]) -> Result<()> {
        let Some(path) = self.path(stage, digest) else {
            return Ok(());
        };
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&Sha256::digest(payload)).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.write_all(payload).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(Some(dir.path().to_path_buf()));
        assert!(cache.get("embed", "abc").is_none());
        cache.put("embed", "abc", b"payload").unwrap();
        assert_eq!(cache.get("embed", "abc").unwrap(), b"payload");

        let file = dir.path().join("embed").join("abc.bin");
        let mut bytes = fs::read(&file).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&file, bytes).unwrap();
        assert!(cache.get("embed", "abc").is_none());

        let off = Cache::disabled();
        off.put("embed", "abc", b"x").unwrap();
        assert!(off.get("embed", "abc").is_none());
    }

    #[test]
    fn digests_separate_fields() {
        let a = DigestBuilder::new("s").bytes(b"ab").bytes(b"c").finish();
        let b = DigestBuilder::new("s").bytes(b"a").bytes(b"bc").finish();
        assert_ne!(a, b);
        assert_ne!(
            DigestBuilder::new("s").finish(),
            DigestBuilder::new("t").finish()
        );
        assert_eq!(a.len(), 64);
    }
}
