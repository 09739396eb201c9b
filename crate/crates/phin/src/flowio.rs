//! Flow fields on disk: `PHFL`, height and width as little-endian `u32`,
//! then `(u, v)` pairs as little-endian `f32` in row-major order.

use std::path::Path;

use phin_core::media::FlowField;

use crate::error::{Error, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"PHFL";

pub fn encode(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a flow file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let n = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| Error::Data("flow dimensions overflow".into()))?;
    let body = &bytes[12..];
    if body.len() != n * 4 {
        return Err(Error::Data(format!("flow payload has {} bytes, expected {}", body.len(), n * 4)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(FlowField::new(h, w, data)?)
}

pub fn read(path: &Path) -> Result<FlowField> {
    decode(&fsio::read(path)?).map_err(|e| e.in_file(path))
}

pub fn write(path: &Path, flow: &FlowField) -> Result<()> {
    fsio::write(path, &encode(flow))
}
