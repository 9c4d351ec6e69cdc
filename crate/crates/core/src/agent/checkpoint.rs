//! Checkpoint directory: `manifest.json` (config echo, tensor table, format
//! version) and `params.bin` (little-endian f32, row-major, concatenated in
//! manifest order).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::AgentConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT: &str = "topdown-attention-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u64,
    pub config: AgentConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ParamSet<f32>, config: &AgentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: params.version(),
        config: config.clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let corrupt = |reason: String| Error::CorruptManifest {
        path: path.clone(),
        reason,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unsupported format `{}`", manifest.format)));
    }
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(corrupt(format!("`{}` has dtype {}", entry.name, entry.dtype)));
        }
        let numel: u64 = entry.shape.iter().map(|&d| d as u64).product();
        if numel * 4 != entry.length {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                expected: vec![(entry.length / 4) as usize],
                found: entry.shape.clone(),
            });
        }
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet<f32>, AgentConfig)> {
    let manifest = read_manifest(dir)?;
    let blob_path: PathBuf = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path)?;

    let expected = manifest.config.param_specs();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::CorruptManifest {
            path: dir.join(MANIFEST_FILE),
            reason: format!(
                "{} tensors listed, config defines {}",
                manifest.tensors.len(),
                expected.len()
            ),
        });
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let spec = expected
            .iter()
            .find(|s| s.name == entry.name)
            .ok_or_else(|| Error::UnknownParam(entry.name.clone()))?;
        if spec.shape != entry.shape {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                expected: spec.shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let end = entry.offset + entry.length;
        if end > blob.len() as u64 {
            return Err(Error::TruncatedBlob {
                path: blob_path,
                needed: end,
                found: blob.len() as u64,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    params.set_version(manifest.version);
    Ok((params, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{init_params, Variant};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AgentConfig::tiny(Variant::FixedQuery);
        let mut p = init_params(&cfg, 9);
        p.set_version(17);
        save_checkpoint(&p, &cfg, dir.path()).unwrap();
        let (q, cfg2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(q.version(), 17);
        for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AgentConfig::tiny(Variant::TopDown);
        save_checkpoint(&init_params(&cfg, 0), &cfg, dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::TruncatedBlob { .. })));
    }

    #[test]
    fn garbage_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AgentConfig::tiny(Variant::TopDown);
        save_checkpoint(&init_params(&cfg, 0), &cfg, dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptManifest { .. })));
    }
}
