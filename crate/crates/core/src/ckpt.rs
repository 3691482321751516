//! On-disk checkpoints: a JSON manifest describing every tensor plus a flat
//! little-endian f32 weight blob, written in parameter registration order so
//! identical runs produce identical files.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::dual::DualModel;
use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// What stage produced the checkpoint: the pretrained base denoiser (U-Net +
/// text encoder only) or the full dual model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Dual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weight blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub background_conditioning: bool,
    pub config: DenoiserConfig,
    pub tensors: Vec<TensorRecord>,
}

/// Write every parameter of `store` to `dir` as a checkpoint.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    store: &ParamStore<F>,
    kind: CheckpointKind,
    config: &DenoiserConfig,
    background_conditioning: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for id in store.ids() {
        let v = store.value(id);
        tensors.push(TensorRecord {
            name: store.name(id).to_string(),
            shape: v.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &x in v.iter() {
            blob.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind,
        background_conditioning,
        config: config.clone(),
        tensors,
    };
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Data(format!("serializing checkpoint manifest: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Stage-one convenience: base kind, no background conditioning.
pub fn save_base_checkpoint<F: Scalar>(
    dir: &Path,
    store: &ParamStore<F>,
    config: &DenoiserConfig,
) -> Result<()> {
    save_checkpoint(dir, store, CheckpointKind::Base, config, false)
}

/// Stage-two convenience: dual kind with the model's own settings.
pub fn save_dual_checkpoint<F: Scalar>(
    dir: &Path,
    store: &ParamStore<F>,
    model: &DualModel,
) -> Result<()> {
    save_checkpoint(dir, store, CheckpointKind::Dual, model.config(), model.with_background())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("bad checkpoint manifest {}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CoreError::Config(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Load a checkpoint into `store` by tensor name. Every tensor in the file
/// must exist in the store with a matching shape. With `require_exact`, the
/// file must also cover every store parameter — use that when restoring a
/// like-for-like model; leave it off to seed a dual model's frozen base from
/// a stage-one checkpoint.
pub fn apply_checkpoint<F: Scalar>(
    store: &mut ParamStore<F>,
    dir: &Path,
    require_exact: bool,
) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut covered = HashSet::new();
    for rec in &manifest.tensors {
        let id = store.lookup(&rec.name).ok_or_else(|| {
            CoreError::Config(format!(
                "checkpoint tensor {:?} has no matching parameter (wrong model kind or configuration?)",
                rec.name
            ))
        })?;
        if store.value(id).shape() != rec.shape.as_slice() {
            return Err(CoreError::Shape(format!(
                "checkpoint tensor {:?} has shape {:?} but the parameter has {:?}",
                rec.name,
                rec.shape,
                store.value(id).shape()
            )));
        }
        let n: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                CoreError::Data(format!(
                    "weight blob truncated: tensor {:?} needs bytes {}..{} of {}",
                    rec.name,
                    start,
                    start + 4 * n,
                    blob.len()
                ))
            })?;
        for (slot, chunk) in
            store.value_mut(id).iter_mut().zip(blob[start..end].chunks_exact(4))
        {
            *slot = F::from_f64(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
        covered.insert(id);
    }
    if require_exact {
        let missing: Vec<String> = store
            .ids()
            .filter(|id| !covered.contains(id))
            .map(|id| store.name(id).to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CoreError::Config(format!(
                "checkpoint covers {} of {} parameters; first missing: {:?}",
                covered.len(),
                covered.len() + missing.len(),
                &missing[..missing.len().min(3)]
            )));
        }
    }
    Ok(manifest)
}
