//! Content-addressed stage cache.
//!
//! Every pipeline stage derives a key from the exact bytes of its inputs
//! (configs, tokenizer fingerprint, corpus fingerprint, upstream keys).
//! Stage outputs live under `root/<stage>/<key>/` and a slot counts as a
//! hit only once its `DONE` marker exists; the marker is written last via
//! atomic rename, so interrupted stages re-run.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

pub const CACHE_ENV_VAR: &str = "FPLAB_CACHE_DIR";

#[derive(Clone, Debug)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageCache { root: root.into() }
    }

    /// Cache root from `FPLAB_CACHE_DIR`, defaulting to `.fplab-cache`.
    pub fn from_env() -> Self {
        let root = std::env::var_os(CACHE_ENV_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".fplab-cache"));
        StageCache::new(root)
    }

    pub fn slot(&self, stage: &str, key_parts: &[&[u8]]) -> CacheSlot {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        for part in key_parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        let key = crate::lm::hex(&hasher.finalize())[..24].to_string();
        CacheSlot {
            dir: self.root.join(stage).join(key),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CacheSlot {
    dir: PathBuf,
}

impl CacheSlot {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn is_hit(&self) -> bool {
        self.dir.join("DONE").exists()
    }

    pub fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    pub fn mark_done(&self) -> Result<()> {
        super::atomic_write(&self.dir.join("DONE"), b"ok\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_stable_and_input_sensitive() {
        let cache = StageCache::new("/tmp/x");
        let a = cache.slot("tok", &[b"corpus-1", b"512"]);
        let b = cache.slot("tok", &[b"corpus-1", b"512"]);
        let c = cache.slot("tok", &[b"corpus-2", b"512"]);
        let d = cache.slot("lm", &[b"corpus-1", b"512"]);
        assert_eq!(a.dir(), b.dir());
        assert_ne!(a.dir(), c.dir());
        assert_ne!(a.dir(), d.dir());
        // length-prefixing keeps concatenations apart
        let e = cache.slot("tok", &[b"corpus", b"-1512"]);
        assert_ne!(a.dir(), e.dir());
    }

    #[test]
    fn hit_requires_done_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::new(dir.path());
        let slot = cache.slot("stage", &[b"k"]);
        assert!(!slot.is_hit());
        slot.prepare().unwrap();
        std::fs::write(slot.path("out.bin"), b"data").unwrap();
        assert!(!slot.is_hit());
        slot.mark_done().unwrap();
        assert!(slot.is_hit());
    }
}
