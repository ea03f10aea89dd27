//! `JMT1` binary tensor files: the magic `JMT1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JMT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut words = bytes.get(4..).ok_or_else(|| bad("truncated header"))?.chunks_exact(4);
    if &bytes[..4] != MAGIC {
        return Err(bad("missing JMT1 magic"));
    }
    let mut next = || {
        words
            .next()
            .map(|w| u32::from_le_bytes(w.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = next()? as usize;
    let shape = (0..rank).map(|_| next().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[8 + 4 * rank..];
    if payload.len() != 4 * numel {
        return Err(bad(&format!(
            "payload of {} bytes for shape {shape:?}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|w| f64::from(f32::from_le_bytes(w.try_into().unwrap())))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
