//! Model checkpoints: a one-line JSON header listing every tensor, followed
//! by the raw little-endian `f64` payload in canonical parameter order.
//!
//! Loading is strict: the header's format version, config hash, variant, and
//! per-tensor names and shapes must all match the expectation, and the
//! payload length must be exact. A checkpoint is only valid against the run
//! configuration that produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockVariant;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::rng::SplitMix64;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    format_version: u32,
    variant: BlockVariant,
    tensors: Vec<TensorEntry>,
}

/// Writes `params` to `path`, stamping the header with `config_hash`.
pub fn save(path: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(params.num_params() * 8);
    params.visit(&mut |name, t| {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec() });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        config_hash: config_hash.to_string(),
        format_version: FORMAT_VERSION,
        variant: params.variant,
        tensors,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save`], verifying it against the expected
/// variant, dimensions, and config hash.
pub fn load(
    path: &Path,
    variant: BlockVariant,
    dims: ModelDims,
    config_hash: &str,
) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::config(format!("{}: missing checkpoint header", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "checkpoint format version {} (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    if header.config_hash != config_hash {
        return Err(Error::config(format!(
            "checkpoint was written for config {} but this run hashes to {}",
            header.config_hash, config_hash
        )));
    }
    if header.variant != variant {
        return Err(Error::config(format!(
            "checkpoint holds a {} model, run config asks for {}",
            header.variant.name(),
            variant.name()
        )));
    }

    // The values are fully overwritten below; the seeded init only provides
    // the structure to walk.
    let mut params = ModelParams::init(variant, dims, &mut SplitMix64::new(0))?;
    let payload = &bytes[newline + 1..];
    let mut entry = 0usize;
    let mut offset = 0usize;
    let mut first_err: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if first_err.is_some() {
            return;
        }
        let expect = header.tensors.get(entry);
        entry += 1;
        let Some(expect) = expect else {
            first_err = Some(Error::config("checkpoint lists fewer tensors than the model"));
            return;
        };
        if expect.name != name || expect.shape != t.shape() {
            first_err = Some(Error::config(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                expect.name,
                expect.shape,
                name,
                t.shape()
            )));
            return;
        }
        let n = t.data().len() * 8;
        let Some(chunk) = payload.get(offset..offset + n) else {
            first_err = Some(Error::config("checkpoint payload is truncated"));
            return;
        };
        for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
        offset += n;
    });
    if let Some(err) = first_err {
        return Err(err);
    }
    if entry != header.tensors.len() {
        return Err(Error::config("checkpoint lists more tensors than the model"));
    }
    if offset != payload.len() {
        return Err(Error::config(format!(
            "checkpoint payload has {} trailing bytes",
            payload.len() - offset
        )));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn dims() -> ModelDims {
        let model = ModelConfig { d: 12, heads: 2, layers: 2, patch: 2 };
        ModelDims::new(&model, 3)
    }

    fn sample_params() -> ModelParams {
        ModelParams::init(BlockVariant::MnV2, dims(), &mut SplitMix64::new(99)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params();
        save(&path, &params, "abc123").unwrap();
        let loaded = load(&path, BlockVariant::MnV2, dims(), "abc123").unwrap();
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.data().len(), b.data().len());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_params(), "abc123").unwrap();
        let err = load(&path, BlockVariant::MnV2, dims(), "zzz").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_wrong_variant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_params(), "abc123").unwrap();
        let err = load(&path, BlockVariant::MnV1, dims(), "abc123").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_params(), "abc123").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load(&path, BlockVariant::MnV2, dims(), "abc123").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_params(), "abc123").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path, BlockVariant::MnV2, dims(), "abc123").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(load(&path, BlockVariant::MnV2, dims(), "abc123").is_err());
    }
}
