//! GTF binary tensor files.
//!
//! Layout: magic `GTF1`, little-endian `u32` rank, `rank` little-endian `u32`
//! dimensions, then `product(dims)` little-endian `f32` values in row-major
//! order. Values are narrowed to `f32` on write and widened on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GTF1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut next_u32 = || words.next().map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]));
    let rank = next_u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    if rank == 0 || 4 * (2 + rank) > bytes.len() {
        return Err(corrupt("invalid rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = next_u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        if d == 0 {
            return Err(corrupt("zero dimension"));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    let header = 4 * (2 + rank);
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    if bytes.len() < expected {
        return Err(corrupt("truncated data"));
    }
    if bytes.len() > expected {
        return Err(corrupt("trailing bytes"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}
