//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "BIDCKPT\0"
//! version   u32       1
//! mlen      u64       byte length of the manifest
//! manifest  mlen      UTF-8 JSON, see [`CheckpointManifest`]
//! payload   ...       f32 values of every parameter, in manifest order
//! ```
//!
//! Each manifest entry records the parameter path, its shape and the element
//! offset of its first value inside the payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// SHA-256 of the canonical JSON encoding of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// SHA-256 hex digest of a JSON value's canonical (key-sorted, compact) encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let canon = serde_json::to_string(config).expect("json values always serialize");
    hex_digest(canon.as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(store: &ParamStore<f32>, config: &serde_json::Value, meta: serde_json::Value) -> Vec<u8> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.iter() {
        params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(config),
        config: config.clone(),
        params,
        meta,
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + mjson.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &str) -> Result<(ParamStore<f32>, CheckpointManifest), CheckpointError> {
    let bad = |reason: String| CheckpointError::Format { path: path.to_string(), reason };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mend = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[20..mend]).map_err(|e| bad(format!("manifest json: {e}")))?;
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(bad("config hash does not match embedded config".into()));
    }
    let payload = &bytes[mend..];
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(bad(format!("payload holds {} bytes, manifest needs {}", payload.len(), 4 * total)));
    }
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let raw = payload.get(4 * p.offset..4 * (p.offset + n)).ok_or_else(|| bad(format!("{} out of range", p.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(p.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        store.insert(p.name.clone(), t).map_err(|e| bad(e.to_string()))?;
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore<f32>, config: &serde_json::Value, meta: serde_json::Value) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode(store, config, meta)).map_err(io_err)
}

pub fn load(path: &Path) -> Result<(ParamStore<f32>, CheckpointManifest), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap()).unwrap();
        s.insert("a.g", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = json!({"width": 8, "heads": 4});
        let bytes = encode(&store(), &cfg, json!({"epoch": 3}));
        let (back, m) = decode(&bytes, "mem").unwrap();
        assert_eq!(back, store());
        assert_eq!(m.config_hash, config_hash(&cfg));
        assert_eq!(m.params[0].name, "a.g");
        assert_eq!(m.params[1].offset, 3);
        // payload is raw little-endian f32
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(f32::from_le_bytes(tail.try_into().unwrap()), f32::MIN_POSITIVE);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&store(), &json!({}), json!(null));
        let err = decode(&bytes[..bytes.len() - 2], "ck.bin").unwrap_err();
        assert!(err.to_string().contains("ck.bin"));
    }

    #[test]
    fn tampered_config_is_detected() {
        let bytes = encode(&store(), &json!({"width": 8}), json!(null));
        let mut bytes = bytes;
        let at = bytes.windows(9).position(|w| w == b"\"width\":8").unwrap();
        bytes[at + 8] = b'9';
        let err = decode(&bytes, "x").unwrap_err();
        assert!(err.to_string().contains("config hash"));
    }
}
