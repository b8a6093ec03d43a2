//! Model checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! "MLFC" | u32 version
//! u32 in_channels (stage 1) | u32 in_channels (stage 2) | u32 d | u32 blocks
//! u8 lfc_enabled | u32 k | u32 heads | f64 lambda | u8 siamese
//! u32 tensor count
//! per tensor: u16 name length | name | u8 ndim | ndim × u64 dims | f64 payload
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::numgrad::{ParamSet, Tensor, MAX_AXES};
use crate::pipeline::{ModelConfig, ModelParams, SiameseMode};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("tensors disagree with the embedded config: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint ends early")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Trained parameters with the configuration needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub lambda: f64,
    pub siamese: SiameseMode,
}

impl Checkpoint {
    /// Fails with `ShapeMismatch` unless the tensors are exactly those the
    /// config calls for.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let cfg = &self.model.config;
        cfg.validate().map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let want: BTreeMap<String, Vec<usize>> = cfg.param_shapes().into_iter().collect();
        for (name, t) in self.model.params.iter() {
            match want.get(name) {
                None => return Err(CheckpointError::ShapeMismatch(format!("unexpected tensor {name}"))),
                Some(dims) if dims.as_slice() != t.dims() => {
                    return Err(CheckpointError::ShapeMismatch(format!(
                        "{name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(name) = want.keys().find(|n| !self.model.params.contains(n)) {
            return Err(CheckpointError::ShapeMismatch(format!("missing tensor {name}")));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} exceeds u32")))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    ckpt.validate()?;
    let ModelConfig { stage1, stage2 } = &ckpt.model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(stage1.in_channels, "input width")?);
    put_u32(&mut out, to_u32(stage2.in_channels, "input width")?);
    put_u32(&mut out, to_u32(stage1.d, "width")?);
    put_u32(&mut out, to_u32(stage1.blocks, "block count")?);
    out.push(stage1.lfc_enabled as u8);
    put_u32(&mut out, to_u32(stage1.lfc_k, "k")?);
    put_u32(&mut out, to_u32(stage1.lfc_heads, "head count")?);
    out.extend_from_slice(&ckpt.lambda.to_le_bytes());
    out.push(ckpt.siamese.code());
    put_u32(&mut out, to_u32(ckpt.model.params.len(), "tensor count")?);
    for (name, t) in ckpt.model.params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0; N];
        self.0.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader(Cursor::new(bytes));
    let magic = r.bytes::<4>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let in1 = r.u32()?;
    let in2 = r.u32()?;
    let d = r.u32()?;
    let blocks = r.u32()?;
    let lfc_enabled = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(CheckpointError::Malformed(format!("LFC flag {v}"))),
    };
    let lfc_k = r.u32()?;
    let lfc_heads = r.u32()?;
    let lambda = r.f64()?;
    let code = r.u8()?;
    let siamese = SiameseMode::from_code(code)
        .ok_or_else(|| CheckpointError::Malformed(format!("siamese mode {code}")))?;
    let stage = |in_channels| BackboneConfig { in_channels, d, blocks, lfc_enabled, lfc_k, lfc_heads };
    let config = ModelConfig { stage1: stage(in1), stage2: stage(in2) };

    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.bytes()?) as usize;
        if len > r.remaining() {
            return Err(CheckpointError::Truncated);
        }
        let mut name = vec![0; len];
        r.0.read_exact(&mut name).map_err(|_| CheckpointError::Truncated)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        if ndim == 0 || ndim > MAX_AXES {
            return Err(CheckpointError::Malformed(format!("{name} has {ndim} axes")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining())).ok_or(CheckpointError::Truncated)?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let ckpt = Checkpoint { model: ModelParams { config, params }, lambda, siamese };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
