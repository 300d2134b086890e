//! Self-verifying checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DRSRCKPT" | version u32 | header_len u64 | header (JSON) | tensor bytes | sha256 of all preceding bytes
//! ```
//!
//! The header carries caller metadata plus an index of `(name, dtype, shape, offset)`
//! records; tensor bytes are packed back to back in index order.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRSRCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Decoded archive: free-form metadata plus named tensors in stored order.
#[derive(Clone, Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn encode(archive: &Archive) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(archive.tensors.len());
    for (name, t) in &archive.tensors {
        let dtype = dtype_name(t.dtype())?;
        records.push(TensorRecord {
            name: name.clone(),
            dtype: dtype.to_string(),
            shape: t.dims().to_vec(),
            offset: payload.len(),
        });
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: archive.meta.clone(),
        tensors: records,
    })?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses and verifies an archive. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let fail = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(fail("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| fail("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &body[header_end..];
    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        let (dtype, width) = match rec.dtype.as_str() {
            "f32" => (DType::F32, 4),
            "f64" => (DType::F64, 8),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
        };
        if rec.offset != expected_offset {
            return Err(Error::Checkpoint(format!("tensor {} is not packed in order", rec.name)));
        }
        let len = rec
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| fail("tensor size overflows"))?;
        let end = rec.offset.checked_add(len).filter(|&e| e <= payload.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", rec.name)))?;
        let raw = &payload[rec.offset..end];
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
        };
        tensors.push((rec.name, t));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(fail("trailing bytes after the last tensor"));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Writes through a temporary sibling and renames, so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
