//! Single-file checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"SELFCTL1"
//! u32  format version
//! u32  header length, then that many bytes of JSON (model config, schedule echo, step)
//! u32  tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 rank, then rank × u64 dims
//!   raw element bytes
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"SELFCTL1";
pub const FORMAT_VERSION: u32 = 1;

/// Diffusion constants repeated in the header so they can be read without
/// parsing the full model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEcho {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub schedule: ScheduleEcho,
    pub dtype: String,
    pub step: usize,
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

/// Serializes `model` (and the training step it reached) to bytes.
pub fn to_bytes(model: &Model, step: usize) -> Result<Vec<u8>> {
    let cfg = model.config();
    let header = CheckpointHeader {
        model: cfg.clone(),
        schedule: ScheduleEcho {
            train_steps: cfg.diffusion.train_steps,
            beta_start: cfg.diffusion.beta_start,
            beta_end: cfg.diffusion.beta_end,
            sample_steps: cfg.diffusion.sample_steps,
        },
        dtype: dtype_name(model.dtype()).to_string(),
        step,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let params = model.store().named();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, var) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_code(var.dtype())?);
        out.extend_from_slice(&(var.rank() as u32).to_le_bytes());
        for &d in var.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flat = var.as_tensor().flatten_all()?;
        match var.dtype() {
            DType::F32 => flat
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn save(model: &Model, step: usize, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, step)?;
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len().saturating_sub(r.position() as usize);
    if n > remaining {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(buf)
}

/// Header and named tensors of a serialized checkpoint.
pub fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = Cursor::new(bytes);
    let magic = read_bytes(&mut r, MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = read_u32(&mut r)? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&read_bytes(&mut r, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let code = read_bytes(&mut r, 1)?[0];
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let tensor = match code {
            0 => {
                let raw = read_bytes(&mut r, n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = read_bytes(&mut r, n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        };
        tensors.push((name, tensor));
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

/// Rebuilds the model stored in `bytes`; returns it with the recorded step.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, usize)> {
    let (header, tensors) = parse(bytes)?;
    let dtype = match header.dtype.as_str() {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let model = Model::new(header.model, dtype, 0)?;
    model.store().load_from(&tensors)?;
    Ok((model, header.step))
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::path(path, msg),
        other => other,
    })
}
