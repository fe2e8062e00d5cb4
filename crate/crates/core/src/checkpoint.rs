//! Weight container: named little-endian f32 arrays with shapes.
//!
//! Layout: magic `FPCK`, `u32` version, `u32` length + UTF-8 JSON model
//! config, `u32` array count, then per array `u16` name length, name, `u32`
//! rank, `u64` per dimension, `f32` data; finally a `u32` CRC-32 of all
//! preceding bytes. The frozen Fourier basis is stored as `rff.B`.

use std::path::Path;

use thiserror::Error;

use crate::autograd::ParamStore;
use crate::fusion::{ModelConfig, ModelError, PoseModel};
use crate::pointops::FourierBasis;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const BASIS_NAME: &str = "rff.B";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Serialises named arrays with the model config.
pub fn encode_arrays(config_json: &str, arrays: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }
}

/// Inverse of [`encode_arrays`].
pub fn decode_arrays(buf: &[u8]) -> Result<(String, Vec<(String, Tensor<f32>)>), CheckpointError> {
    if buf.len() < 4 || buf[..4] != CHECKPOINT_MAGIC {
        return Err(if CHECKPOINT_MAGIC.starts_with(buf) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    let mut cur = Cursor { buf, pos: 4 };
    let mut take = |n: usize| cur.take(n);
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config = std::str::from_utf8(take(n)?).map_err(|_| CheckpointError::Schema("config is not UTF-8".into()))?.to_string();
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| CheckpointError::Schema("array name is not UTF-8".into()))?.to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(CheckpointError::Schema(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let bytes = take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((name, Tensor::from_vec(&shape, data)));
    }
    drop(take);
    let body_end = cur.pos;
    let crc = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if crc32fast::hash(&buf[..body_end]) != crc {
        return Err(CheckpointError::Checksum);
    }
    if cur.pos != buf.len() {
        return Err(CheckpointError::Schema("trailing bytes".into()));
    }
    Ok((config, arrays))
}

pub fn encode_checkpoint<T: Scalar>(model: &PoseModel<T>) -> Vec<u8> {
    let config = serde_json::to_string(&model.config).expect("config serialises");
    let mut arrays: Vec<(String, Tensor<f32>)> = model.store.ids().map(|id| (model.store.name(id).to_string(), model.store.get(id).cast())).collect();
    arrays.push((BASIS_NAME.to_string(), model.basis.b.cast()));
    encode_arrays(&config, &arrays)
}

pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<PoseModel<T>, CheckpointError> {
    let (config, arrays) = decode_arrays(buf)?;
    let config: ModelConfig = serde_json::from_str(&config).map_err(|e| CheckpointError::Schema(format!("config: {e}")))?;
    let mut store = ParamStore::new();
    let mut basis = None;
    for (name, t) in arrays {
        if name == BASIS_NAME {
            basis = Some(FourierBasis::from_matrix(t.cast(), config.rff_sigma).map_err(|e| CheckpointError::Schema(e.to_string()))?);
        } else {
            if store.find(&name).is_some() {
                return Err(CheckpointError::Schema(format!("duplicate array {name}")));
            }
            store.add(name, t.cast());
        }
    }
    let basis = basis.ok_or_else(|| CheckpointError::Schema(format!("missing {BASIS_NAME}")))?;
    // Every array must match the layout a fresh model of this config has.
    let reference = PoseModel::<f32>::init(&config, 0)?;
    if reference.store.len() != store.len() {
        return Err(CheckpointError::Schema(format!("{} parameter arrays, expected {}", store.len(), reference.store.len())));
    }
    for id in reference.store.ids() {
        let name = reference.store.name(id);
        let found = store.find(name).ok_or_else(|| CheckpointError::Schema(format!("missing array {name}")))?;
        if store.get(found).shape() != reference.store.get(id).shape() {
            return Err(CheckpointError::Schema(format!("{name}: shape {:?}, expected {:?}", store.get(found).shape(), reference.store.get(id).shape())));
        }
    }
    Ok(PoseModel::from_parts(config, store, basis)?)
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint<T: Scalar>(model: &PoseModel<T>, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("fpck.tmp");
    std::fs::write(&tmp, encode_checkpoint(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<PoseModel<T>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
