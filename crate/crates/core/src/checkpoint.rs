//! Checkpoint persistence.
//!
//! Layout: an 8-byte magic (`PSKCKPT1`), a little-endian u64 manifest length,
//! a UTF-8 JSON manifest listing `{name, shape, dtype, byte_offset,
//! partition_tag}` per tensor, then one contiguous payload of little-endian
//! IEEE-754 `f32` values, row-major per tensor, in manifest order.
//! `byte_offset` is relative to the payload start. Round-trips are bit-exact.
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place, so a crash never leaves a half-written checkpoint behind.

use crate::error::{Error, Result};
use crate::model::{ParamRole, ParamStore, Partition};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PSKCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub partition_tag: String,
}

pub fn manifest_of(store: &ParamStore<f32>) -> Vec<ManifestEntry> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, entry) in store.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: entry.tensor.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
            partition_tag: entry.partition.tag().into(),
        });
        offset += (entry.tensor.len() * 4) as u64;
    }
    entries
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let manifest = serde_json::to_vec(&manifest_of(store))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(MAGIC)?;
        file.write_all(&(manifest.len() as u64).to_le_bytes())?;
        file.write_all(&manifest)?;
        let mut payload = Vec::new();
        for (_, entry) in store.iter() {
            for v in entry.tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?} is not a checkpoint (bad magic)")));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    for entry in &manifest {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} extends past the payload ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let role = ParamRole::from_name(&entry.name)
            .map_err(|_| Error::Checkpoint(format!("unknown parameter name {:?}", entry.name)))?;
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {:?}: {e}", entry.name)))?;
        store.insert(entry.name.clone(), tensor, role);
        store.get_mut(&entry.name)?.partition = Partition::from_tag(&entry.partition_tag)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_param_store, partition_params, ModelConfig, Protocol, Variant};

    fn small_store() -> (ParamStore<f32>, ModelConfig) {
        let mut cfg = ModelConfig {
            vocab_size: 11,
            n_layers: 2,
            max_seq_len: 8,
            block: crate::blocks::BlockConfig {
                d_model: 8,
                n_heads: 2,
                ..crate::blocks::BlockConfig::default()
            },
            tie_embeddings: true,
        };
        Variant::PreprojSkip.apply(&mut cfg.block, 0).unwrap();
        let mut store = init_param_store(&cfg, 7).unwrap();
        partition_params(&mut store, Protocol::Probe).unwrap();
        (store, cfg)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (store, _cfg) = small_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, entry) in store.iter() {
            let other = loaded.get(name).unwrap();
            assert_eq!(entry.tensor.data(), other.tensor.data(), "{name}");
            assert_eq!(entry.partition, other.partition, "{name}");
            assert_eq!(entry.role, other.role, "{name}");
        }
        // Order preserved too: manifests must be identical.
        assert_eq!(
            serde_json::to_string(&manifest_of(&store)).unwrap(),
            serde_json::to_string(&manifest_of(&loaded)).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load(Path::new("/nonexistent/path/model.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn foreign_tensor_names_are_rejected() {
        let (store, _cfg) = small_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();
        // Corrupt the manifest by renaming a tensor to an unknown name of
        // equal length, leaving all framing intact.
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"embed.weight";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos..pos + needle.len()].copy_from_slice(b"embXd.weight");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
