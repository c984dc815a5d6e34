//! Single-file checkpoint: JSON manifest plus a raw little-endian f64 blob.
//! A load of a save reproduces every parameter bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunConfig, TrainError};
use crate::autodiff::{ParamStore, Tensor};
use crate::data::Scaler;

const MAGIC: &[u8; 8] = b"FLOWCKPT";

/// Everything needed to evaluate or resume analysis of a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub scaler: Scaler,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    /// Offset into the value blob, in f64 entries.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    scaler: Scaler,
    params: Vec<ManifestParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut params = Vec::with_capacity(self.store.len());
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, tensor) in self.store.iter() {
            params.push(ManifestParam {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += tensor.numel();
        }
        let manifest = Manifest {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            params,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| TrainError::Checkpoint(format!("manifest encode: {e}")))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest_bytes.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&blob);
        fs::write(path, out).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TrainError::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap();
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let manifest_start = MAGIC.len() + 8;
        let blob_start = manifest_start + manifest_len;
        if bytes.len() < blob_start {
            return Err(TrainError::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..blob_start])
            .map_err(|e| TrainError::Checkpoint(format!("manifest decode: {e}")))?;
        let blob = &bytes[blob_start..];
        let mut store = ParamStore::new();
        for p in &manifest.params {
            let numel: usize = p.shape.iter().product();
            let lo = p.offset * 8;
            let hi = lo + numel * 8;
            if blob.len() < hi {
                return Err(TrainError::Checkpoint(format!(
                    "value blob too short for parameter `{}`",
                    p.name
                )));
            }
            let data: Vec<f64> = blob[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store
                .insert(&p.name, Tensor::new(p.shape.clone(), data))
                .map_err(|e| TrainError::Checkpoint(format!("duplicate name: {e}")))?;
        }
        Ok(Checkpoint {
            config: manifest.config,
            scaler: manifest.scaler,
            store,
        })
    }
}
