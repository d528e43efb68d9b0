//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 JSON length, JSON metadata
//! (kind, config, seed, trained flag, tensor index), then raw little-endian
//! f32 data per tensor. Writes are atomic (temp file + rename).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which network this is ("inpainter", "segmenter", "feature_pyramid").
    pub kind: String,
    /// The full network config, round-trippable.
    pub config: serde_json::Value,
    pub seed: u64,
    pub trained: bool,
    /// Free-form stage bookkeeping (epoch counts, optimizer step, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub tensors: Vec<TensorInfo>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_checkpoint(path: &Path, mut meta: CheckpointMeta, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    meta.tensors = tensors
        .iter()
        .map(|(name, arr)| TensorInfo { name: name.clone(), shape: arr.shape().to_vec() })
        .collect();
    let json = serde_json::to_vec(&meta).map_err(|e| ckpt_err(path, format!("metadata encode: {e}")))?;

    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    for (_, arr) in tensors {
        let arr = arr.as_standard_layout();
        for &v in arr.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f32>)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + json_len {
        return Err(ckpt_err(path, "truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..20 + json_len])
        .map_err(|e| ckpt_err(path, format!("metadata decode: {e}")))?;

    let mut offset = 20 + json_len;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for info in &meta.tensors {
        let count: usize = info.shape.iter().product();
        let need = count * 4;
        if bytes.len() < offset + need {
            return Err(ckpt_err(path, format!("truncated tensor data for '{}'", info.name)));
        }
        let mut flat = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            flat.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        offset += need;
        let arr = ArrayD::from_shape_vec(info.shape.clone(), flat)
            .map_err(|e| ckpt_err(path, format!("tensor '{}' shape error: {e}", info.name)))?;
        tensors.push((info.name.clone(), arr));
    }
    Ok((meta, tensors))
}

/// SHA-256 of the checkpoint file, hex-encoded. Used to detect stale prior
/// caches.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_encode(&hasher.finalize()))
}

pub fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over an f32 array's little-endian bytes; used for artifact
/// determinism checks.
pub fn array_hash(arr: &ndarray::ArrayView3<f32>) -> String {
    let mut hasher = Sha256::new();
    for &v in arr.as_standard_layout().iter() {
        hasher.update(v.to_le_bytes());
    }
    hex_encode(&hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn roundtrip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let meta = CheckpointMeta {
            kind: "inpainter".into(),
            config: serde_json::json!({"levels": 3, "base_width": 16}),
            seed: 99,
            trained: true,
            extra: serde_json::json!({"epochs_done": 4}),
            tensors: vec![],
        };
        let tensors = vec![
            ("w0".to_string(), ArrayD::from_shape_vec(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 7.5, -0.125]).unwrap()),
            ("b0".to_string(), ArrayD::from_shape_vec(vec![2], vec![0.5, -0.5]).unwrap()),
        ];
        save_checkpoint(&path, meta, &tensors).unwrap();
        let (meta2, tensors2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.kind, "inpainter");
        assert_eq!(meta2.seed, 99);
        assert!(meta2.trained);
        assert_eq!(meta2.extra["epochs_done"], 4);
        assert_eq!(tensors2.len(), 2);
        assert_eq!(tensors2[0].0, "w0");
        assert_eq!(tensors2[0].1, tensors[0].1);
        assert_eq!(tensors2[1].1, tensors[1].1);
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn hash_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let meta = CheckpointMeta {
            kind: "x".into(),
            config: serde_json::Value::Null,
            seed: 0,
            trained: false,
            extra: serde_json::Value::Null,
            tensors: vec![],
        };
        let t1 = vec![("w".to_string(), ArrayD::from_shape_vec(vec![1], vec![1.0]).unwrap())];
        let t2 = vec![("w".to_string(), ArrayD::from_shape_vec(vec![1], vec![2.0]).unwrap())];
        save_checkpoint(&a, meta.clone(), &t1).unwrap();
        save_checkpoint(&b, meta, &t2).unwrap();
        assert_ne!(checkpoint_hash(&a).unwrap(), checkpoint_hash(&b).unwrap());
    }
}
