//! Content-addressed stage directories under `<out>/stages/`.

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::PipelineError;

pub const COMPLETE_MARKER: &str = ".complete";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Accumulates a stage's inputs and options into a digest.
#[derive(Clone)]
pub struct StageKey {
    stage: String,
    hasher: Sha256,
}

impl StageKey {
    pub fn new(stage: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update(b"\n");
        Self {
            stage: stage.to_string(),
            hasher,
        }
    }

    pub fn field(mut self, key: &str, value: impl Display) -> Self {
        self.hasher.update(format!("{key}={value}\n").as_bytes());
        self
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn digest(&self) -> String {
        hex(&self.hasher.clone().finalize())
    }
}

/// One executed (or reused) stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub path: PathBuf,
    pub seconds: f64,
    pub cached: bool,
}

/// Runs `build` into a fresh directory unless a completed directory for the
/// same key exists. The directory is populated under a temporary name and
/// renamed into place, so a crash never leaves a stage that looks complete.
pub fn run_stage(
    root: &Path,
    key: &StageKey,
    build: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<StageRecord, PipelineError> {
    let started = Instant::now();
    let digest = key.digest();
    let dir = root.join(format!("{}-{}", key.stage(), &digest[..16]));
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    if dir.join(COMPLETE_MARKER).is_file() {
        return Ok(StageRecord {
            stage: key.stage().to_string(),
            path: dir,
            seconds: started.elapsed().as_secs_f64(),
            cached: true,
        });
    }
    let tmp = root.join(format!(".{}-{}.tmp", key.stage(), &digest[..16]));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    build(&tmp)?;
    fs::write(tmp.join(COMPLETE_MARKER), format!("{digest}\n")).map_err(io(&tmp))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io(&dir))?;
    }
    fs::rename(&tmp, &dir).map_err(io(&dir))?;
    Ok(StageRecord {
        stage: key.stage().to_string(),
        path: dir,
        seconds: started.elapsed().as_secs_f64(),
        cached: false,
    })
}
