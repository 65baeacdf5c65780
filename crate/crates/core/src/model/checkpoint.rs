//! Binary checkpoint format.
//!
//! ```text
//! 8 bytes   magic "DLENSCKP"
//! 4 bytes   header length N, u32 little-endian
//! N bytes   UTF-8 JSON header: format_version, config, tensor manifest
//!           (name, dtype "f32", shape, byte offset into the payload)
//! ...       contiguous little-endian f32 payload
//! ```
//!
//! The manifest must list exactly the parameters the config implies, in
//! order, at contiguous offsets, and the payload must be exactly as long as
//! the manifest says. Values are stored as f32 and widened on load.

use std::fs;
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Transformer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DLENSCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("header is not valid: {0}")]
    Header(String),
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Serializes a model. Equal models always produce identical bytes.
pub fn to_bytes(model: &Transformer) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = model
        .params()
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params().values() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Transformer, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 4] = rest
        .get(..4)
        .ok_or(CheckpointError::Truncated("header length"))?
        .try_into()
        .expect("4 bytes");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let rest = &rest[4..];
    let header_bytes = rest.get(..header_len).ok_or(CheckpointError::Truncated("header"))?;
    let payload = &rest[header_len..];

    let header_text = std::str::from_utf8(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let header: Header = serde_json::from_str(header_text).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: header.format_version,
        });
    }
    header.config.validate()?;

    let implied = header.config.manifest_len();
    if implied != Some(header.tensors.len()) {
        return Err(CheckpointError::Manifest(format!(
            "{} tensors listed, config implies {implied:?}",
            header.tensors.len(),
        )));
    }
    let expected = header.config.manifest();
    let mut offset = 0u64;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f32" {
            return Err(CheckpointError::Manifest(format!(
                "entry `{}` {:?} ({}) where config expects `{name}` {shape:?} (f32)",
                entry.name, entry.shape, entry.dtype
            )));
        }
        if entry.offset != offset {
            return Err(CheckpointError::Manifest(format!(
                "`{name}` at offset {}, expected {offset}",
                entry.offset
            )));
        }
        let bytes = shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| CheckpointError::Manifest(format!("`{name}` size overflows")))?;
        offset = offset
            .checked_add(bytes)
            .ok_or_else(|| CheckpointError::Manifest("payload size overflows".into()))?;
    }
    if (payload.len() as u64) < offset {
        return Err(CheckpointError::Truncated("payload"));
    }
    if payload.len() as u64 > offset {
        return Err(CheckpointError::TrailingBytes(payload.len() - offset as usize));
    }

    let mut params = IndexMap::with_capacity(expected.len());
    let mut cursor = 0usize;
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        let data = payload[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        cursor += 4 * n;
        params.insert(name, Tensor::new(shape, data).map_err(ModelError::from)?);
    }
    Ok(Transformer::from_params(header.config, params)?)
}

pub fn save(model: &Transformer, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Transformer, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn model() -> Transformer {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 8,
            tie_unembedding: false,
        };
        Transformer::init(cfg, &mut Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&model(), &a).unwrap();
        let loaded = load(&a).unwrap();
        save(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn stores_at_f32_width() {
        let m = model();
        let loaded = from_bytes(&to_bytes(&m)).unwrap();
        for (orig, back) in m.params().values().zip(loaded.params().values()) {
            for (&x, &y) in orig.data().iter().zip(back.data()) {
                assert_eq!(y, x as f32 as f64);
            }
        }
    }

    fn rewrite_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        edit(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[12 + n..]);
        out
    }

    #[test]
    fn mismatched_declared_shape_is_a_manifest_error() {
        let bytes = rewrite_header(&to_bytes(&model()), |h| {
            h["tensors"][0]["shape"] = serde_json::json!([10, 9]);
        });
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::Manifest(_))));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&model());
        assert!(matches!(from_bytes(b"NOTACKPT1234"), Err(CheckpointError::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..10]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(from_bytes(&bytes[..40]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated("payload"))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(CheckpointError::TrailingBytes(1))));
        let v2 = rewrite_header(&bytes, |h| h["format_version"] = 2.into());
        assert!(matches!(from_bytes(&v2), Err(CheckpointError::Version { found: 2 })));
        let huge = rewrite_header(&bytes, |h| h["config"]["vocab_size"] = (1u64 << 40).into());
        assert!(from_bytes(&huge).is_err());
    }
}
