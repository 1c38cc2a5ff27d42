//! Per-stage manifests for resumable runs: a stage is skipped when its
//! recorded input digests and parameter digest match and all outputs still
//! exist. Wall-clock timings go to a plain-text sidecar so every JSON
//! artifact stays byte-deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// FNV-1a 64-bit content digest, hex encoded. Staleness detection only.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

pub fn digest_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub params_digest: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(stage: &str, params: &impl Serialize) -> Self {
        let params_json = serde_json::to_string(params).expect("params serialize");
        Manifest {
            stage: stage.to_string(),
            inputs: BTreeMap::new(),
            params_digest: digest_bytes(params_json.as_bytes()),
            outputs: Vec::new(),
        }
    }

    pub fn input_file(mut self, path: &Path) -> Result<Self, PipelineError> {
        self.inputs
            .insert(path.display().to_string(), digest_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.manifest.json"))
    }

    /// True when a stored manifest matches this one and every recorded
    /// output file exists.
    pub fn is_current(&self, dir: &Path) -> bool {
        let path = Manifest::path(dir, &self.stage);
        let Ok(text) = std::fs::read_to_string(&path) else {
            return false;
        };
        let Ok(stored) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        stored == *self && self.outputs.iter().all(|o| Path::new(o).exists())
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = Manifest::path(dir, &self.stage);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    }
}

/// Appends one `stage,elapsed_ms` line to the timing sidecar. Best-effort.
pub fn record_timing(dir: &Path, stage: &str, elapsed_ms: u128) {
    use std::io::Write;
    let path = dir.join("timings.txt");
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{stage},{elapsed_ms}");
    }
}
