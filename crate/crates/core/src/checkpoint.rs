//! Binary checkpoint format. See `docs/checkpoint-format.md` for the byte layout.

use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"ETHCKPT1";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint is truncated: needed {needed} more bytes at offset {offset}")]
    TruncatedCheckpoint { offset: usize, needed: usize },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Serializes `params` (downcast to `f32`) together with their config.
pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig) -> Vec<u8> {
    let header = cfg.to_text();
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, tensors.len());
    for (name, t) in &tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim());
        for &dim in t.shape() {
            put_u32(&mut out, dim);
        }
    }
    for (_, t) in &tensors {
        for &x in t.iter() {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::TruncatedCheckpoint {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str, CheckpointError> {
        let len = self.u32()?;
        let raw = self.take(len)?;
        std::str::from_utf8(raw).map_err(|_| CheckpointError::CorruptHeader(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, ModelConfig), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(CheckpointError::TruncatedCheckpoint {
                offset: bytes.len(),
                needed: MAGIC.len() - bytes.len(),
            })
        } else {
            Err(CheckpointError::BadMagic)
        };
    }
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header = r.string("config header")?;
    let cfg = ModelConfig::from_text(header).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let layout = cfg.param_layout();

    let count = r.u32()?;
    if count != layout.len() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "{count} tensors stored, config implies {}",
            layout.len()
        )));
    }
    let mut total: usize = 0;
    for (want_name, want_shape) in &layout {
        let name = r.string("tensor name")?;
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(CheckpointError::CorruptHeader(format!("tensor {name:?} claims {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        if name != want_name || &shape != want_shape {
            return Err(CheckpointError::ShapeMismatch(format!(
                "stored {name} {shape:?}, config implies {want_name} {want_shape:?}"
            )));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("tensor {name:?} is too large")))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| CheckpointError::CorruptHeader("tensor table overflows".into()))?;
    }
    let data_bytes = total
        .checked_mul(4)
        .ok_or_else(|| CheckpointError::CorruptHeader("tensor table overflows".into()))?;
    let data = r.take(data_bytes)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::CorruptHeader(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - r.pos
        )));
    }

    let mut params = ModelParams::<f32>::zeros(&cfg);
    let mut chunks = data.chunks_exact(4);
    for (_, mut t) in params.tensors_mut() {
        for x in t.iter_mut() {
            let c = chunks.next().expect("length checked above");
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok((params, cfg))
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(params, cfg)).map_err(|e| io_error(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its tensors fit `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelParams<f32>, CheckpointError> {
    let (params, cfg) = load_checkpoint(path)?;
    if cfg.param_layout() != expected.param_layout() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "checkpoint holds a {cfg} model, expected {expected}"
        )));
    }
    Ok(params)
}

fn io_error(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
