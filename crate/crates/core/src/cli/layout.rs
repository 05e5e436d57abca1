//! Run directory layout, stage records with content digests, and the
//! directory lock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const STAGE_FILE: &str = "stage.json";
pub const LOCK_FILE: &str = ".lock";
pub const RUN_META_FILE: &str = "run-meta.json";
pub const MOCK_STATE_DIR: &str = ".mock-state";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Ingest,
    Dedup,
    Split,
    Annotate,
    Review,
    Diversify,
    Mix,
    Train,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 9] = [
        StageName::Ingest,
        StageName::Dedup,
        StageName::Split,
        StageName::Annotate,
        StageName::Review,
        StageName::Diversify,
        StageName::Mix,
        StageName::Train,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Dedup => "dedup",
            StageName::Split => "split",
            StageName::Annotate => "annotate",
            StageName::Review => "review",
            StageName::Diversify => "diversify",
            StageName::Mix => "mix",
            StageName::Train => "train",
            StageName::Eval => "eval",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Written last by every stage; lists its input digest and output hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub digest: String,
    /// Output paths relative to the stage directory, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Incremental SHA-256 over length-prefixed parts.
#[derive(Clone, Default)]
pub struct InputDigest(Sha256);

impl InputDigest {
    pub fn new(stage: StageName) -> Self {
        let mut d = InputDigest(Sha256::new());
        d.bytes(stage.as_str().as_bytes());
        d
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn json<T: Serialize>(&mut self, v: &T) -> Result<&mut Self> {
        let s = serde_json::to_vec(v).map_err(|e| Error::json("digest input", e))?;
        Ok(self.bytes(&s))
    }

    pub fn file(&mut self, path: &Path) -> Result<&mut Self> {
        let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(self.bytes(&b))
    }

    pub fn finish(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&b)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.root.join(stage.as_str())
    }

    pub fn file(&self, stage: StageName, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }

    pub fn record_path(&self, stage: StageName) -> PathBuf {
        self.file(stage, STAGE_FILE)
    }

    pub fn read_record(&self, stage: StageName) -> Option<StageRecord> {
        crate::jsonl::read_json(self.record_path(stage)).ok()
    }

    /// The record, or an error naming the stage to run first.
    pub fn require(&self, needed_by: StageName, stage: StageName) -> Result<StageRecord> {
        self.read_record(stage)
            .ok_or_else(|| Error::MissingArtifact { stage: needed_by.to_string(), run_first: stage.to_string() })
    }

    /// Whether a stage's recorded digest matches and its outputs are intact.
    pub fn is_current(&self, stage: StageName, digest: &str) -> bool {
        let Some(rec) = self.read_record(stage) else { return false };
        rec.digest == digest
            && rec.outputs.iter().all(|(p, h)| sha256_file(&self.stage_dir(stage).join(p)).is_ok_and(|x| &x == h))
    }

    /// Hashes every file under the stage directory and writes the record.
    pub fn write_record(&self, stage: StageName, digest: String) -> Result<StageRecord> {
        let dir = self.stage_dir(stage);
        let mut outputs = BTreeMap::new();
        for path in walk_files(&dir)? {
            let rel = crate::paths::to_portable(&crate::paths::relative_path(&dir, &path));
            if rel != STAGE_FILE {
                outputs.insert(rel, sha256_file(&path)?);
            }
        }
        let rec = StageRecord { stage, digest, outputs };
        crate::jsonl::write_json(self.record_path(stage), &rec)?;
        Ok(rec)
    }

    /// Removes a stage directory so a re-run starts clean.
    pub fn reset_stage(&self, stage: StageName) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Every regular file under `dir`, sorted.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            let ty = entry.file_type().map_err(|e| Error::io(&path, e))?;
            if ty.is_dir() {
                stack.push(path);
            } else if ty.is_file() {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory `{}` is locked by another process (remove `{}` if that process is gone)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// The only artifact carrying wall-clock times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub status: StageStatus,
    pub digest: String,
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}
