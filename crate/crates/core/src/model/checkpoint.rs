//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    b"NAIMCKPT"
//! version  u32
//! meta     u64 length + UTF-8 JSON (model config, token kinds, extras)
//! count    u32
//! count x  { name: u32 length + UTF-8, ndim: u32, dims: ndim x u64,
//!            data: prod(dims) x f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{NaimConfig, TokenKind};
use super::params::NaimParameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NAIMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NaimConfig,
    pub tokens: Vec<TokenKind>,
    /// Caller-defined record stored alongside the weights, such as the
    /// fitted preprocessor.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(len).read_to_end(&mut b)?;
    if b.len() as u64 != len {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(b)
}

pub fn write_checkpoint(w: &mut impl Write, params: &NaimParameters, extra: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        config: params.config().clone(),
        tokens: params.tokens().to_vec(),
        extra,
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u64(w, json.len() as u64)?;
    w.write_all(&json)?;
    put_u32(w, params.tensors().len() as u32)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(NaimParameters, CheckpointMeta)> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("not a NAIM checkpoint".into()));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = get_u64(r)?;
    let meta: CheckpointMeta = serde_json::from_slice(&get_bytes(r, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = get_u32(r)?;
    let mut names = Vec::with_capacity(count as usize);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, len as u64)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)?;
        let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = get_bytes(r, numel as u64 * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    let params = NaimParameters::from_tensors(&meta.config, &meta.tokens, tensors)?;
    if params.names() != names.as_slice() {
        return Err(Error::Checkpoint("parameter names do not match the model layout".into()));
    }
    Ok((params, meta))
}

pub fn save(path: impl AsRef<Path>, params: &NaimParameters, extra: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, extra)?;
    crate::io::write_atomic(path.as_ref(), &buf)
}

pub fn load(path: impl AsRef<Path>) -> Result<(NaimParameters, CheckpointMeta)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
