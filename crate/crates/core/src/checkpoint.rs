//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json              step, seed, full run config, optimizer counters, last losses
//! <dir>/generator.bin              generator parameters
//! <dir>/discriminator_{k}.bin      parameters of discriminator k (k = 0 is full resolution)
//! <dir>/optim_generator.bin        Adam moments (`m.<param>`, `v.<param>`)
//! <dir>/optim_discriminator_{k}.bin
//! ```
//!
//! Blobs use the layout documented in [`crate::blob`]. A checkpoint is written into a hidden
//! sibling directory and renamed into place, so a reader never observes a partial checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, write_blob, BlobTensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_BLOB: &str = "generator.bin";
pub const GENERATOR_OPTIM_BLOB: &str = "optim_generator.bin";

pub fn discriminator_blob(k: usize) -> String {
    format!("discriminator_{k}.bin")
}

pub fn discriminator_optim_blob(k: usize) -> String {
    format!("optim_discriminator_{k}.bin")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCounters {
    pub steps: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Attention placement label, `"EBD"` or `"B-only"`.
    pub attention: String,
    pub extractor: String,
    pub token_dim: Option<usize>,
    pub image_size: [usize; 2],
    pub config: RunConfig,
    pub generator_optimizer: OptimizerCounters,
    pub discriminator_optimizers: Vec<OptimizerCounters>,
    /// Losses of the last completed step.
    pub metrics: Option<LossBreakdown>,
    pub blobs: Vec<String>,
}

pub fn step_dir_name(step: u64) -> String {
    format!("step_{step:08}")
}

/// Writes `manifest` and `blobs` as checkpoint directory `dir`, replacing any previous one.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    blobs: &[(String, Vec<BlobTensor>)],
) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    for (file, tensors) in blobs {
        write_blob(&tmp.join(file), tensors)?;
    }
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mpath = tmp.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format {}, expected {FORMAT_VERSION}",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

pub fn read_checkpoint_blob(dir: &Path, file: &str) -> Result<Vec<BlobTensor>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    read_blob(&path)
}

/// Newest `step_*` checkpoint below `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if !entry.path().join(MANIFEST_FILE).exists() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Accepts a checkpoint directory, or a run / checkpoints directory holding `step_*` entries.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    for root in [path.join("checkpoints"), path.to_path_buf()] {
        if let Some(found) = latest_checkpoint(&root)? {
            return Ok(found);
        }
    }
    Err(Error::Checkpoint(format!("no checkpoint found at {}", path.display())))
}
