//! Run directories: every output file is recorded in `manifest.json` with a
//! git-style SHA-256 digest, and a lock file keeps out concurrent writers.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ntkrl::format::FORMAT_VERSION;
use ntkrl::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const CONFIG: &str = "config.json";

/// SHA-256 over `"blob <len>\0" ++ content`, as git hashes blobs.
pub fn git_digest(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub task: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    /// Input run directories and the digest of their manifests.
    pub inputs: BTreeMap<String, String>,
    /// Relative path -> digest.
    pub files: BTreeMap<String, String>,
}

/// A run directory open for writing.
pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
    started: Instant,
    lock: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) `path` and takes the lock. Files from an earlier
    /// run with the same name are overwritten.
    pub fn create(path: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("run directory {} is locked by another writer ({LOCK} exists)", path.display()))
            } else {
                e.into()
            }
        })?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut dir = Self {
            path: path.to_path_buf(),
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                command: command.into(),
                config_hash: cfg.hash(),
                seeds: Seeds { model: cfg.model.seed, task: cfg.task.seed, train: cfg.train.seed },
                started_unix,
                wall_clock_secs: 0.0,
                inputs: BTreeMap::new(),
                files: BTreeMap::new(),
            },
            started: Instant::now(),
            lock,
        };
        dir.write(CONFIG, cfg.to_json().as_bytes())?;
        Ok(dir)
    }

    pub fn add_input(&mut self, input: &VerifiedRun) {
        self.manifest.inputs.insert(input.path.display().to_string(), input.manifest_digest.clone());
    }

    /// Writes `rel` under the run directory and records its digest.
    pub fn write(&mut self, rel: &str, content: &[u8]) -> Result<()> {
        let full = self.path.join(rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&full, content)?;
        self.manifest.files.insert(rel.to_string(), git_digest(content));
        Ok(())
    }

    pub fn remove(&mut self, rel: &str) -> Result<()> {
        if self.manifest.files.remove(rel).is_some() {
            fs::remove_file(self.path.join(rel))?;
        }
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = &String> {
        self.manifest.files.keys()
    }

    /// Writes the manifest and releases the lock.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(self.path.join(MANIFEST), text)?;
        Ok(self.path.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// A run directory whose manifest digests all match the files on disk.
#[derive(Debug, Clone)]
pub struct VerifiedRun {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub manifest_digest: String,
    pub config: RunConfig,
}

impl VerifiedRun {
    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        if !self.manifest.files.contains_key(rel) {
            return Err(Error::Integrity(format!("{} has no {rel} in its manifest", self.path.display())));
        }
        Ok(fs::read(self.path.join(rel))?)
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        String::from_utf8(self.read(rel)?).map_err(|e| Error::Format(format!("{rel}: {e}")))
    }

    pub fn has(&self, rel: &str) -> bool {
        self.manifest.files.contains_key(rel)
    }
}

/// Opens a finished run directory and re-verifies every digest.
pub fn open(path: &Path) -> Result<VerifiedRun> {
    let mpath = path.join(MANIFEST);
    let raw = fs::read(&mpath).map_err(|e| Error::Config(format!("{} is not a run directory: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{} has format version {}, expected {FORMAT_VERSION}",
            path.display(),
            manifest.format_version
        )));
    }
    for (rel, digest) in &manifest.files {
        let content = File::open(path.join(rel))
            .and_then(|mut f| {
                let mut buf = Vec::new();
                std::io::Read::read_to_end(&mut f, &mut buf).map(|_| buf)
            })
            .map_err(|e| Error::Integrity(format!("{}: {rel} unreadable: {e}", path.display())))?;
        if &git_digest(&content) != digest {
            return Err(Error::Integrity(format!("{}: digest mismatch for {rel}", path.display())));
        }
    }
    let config = RunConfig::from_json(&String::from_utf8_lossy(&fs::read(path.join(CONFIG))?))?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Integrity(format!("{}: config hash mismatch", path.display())));
    }
    Ok(VerifiedRun { path: path.to_path_buf(), manifest, manifest_digest: git_digest(&raw), config })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_digest_matches_git() {
        // printf 'hello\n' | git hash-object --stdin, in a sha256 repository
        assert_eq!(git_digest(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn manifest_detects_tampering_and_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let mut d = RunDir::create(tmp.path(), "test", &cfg).unwrap();
        assert!(RunDir::create(tmp.path(), "test", &cfg).is_err());
        d.write("a/b.csv", b"x,y\n1,2\n").unwrap();
        d.finish().unwrap();
        assert!(!tmp.path().join(LOCK).exists());
        let run = open(tmp.path()).unwrap();
        assert_eq!(run.read("a/b.csv").unwrap(), b"x,y\n1,2\n");
        fs::write(tmp.path().join("a/b.csv"), b"x,y\n1,3\n").unwrap();
        assert!(matches!(open(tmp.path()), Err(Error::Integrity(_))));
    }
}
