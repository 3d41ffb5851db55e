//! Binary model format.
//!
//! ```text
//! "MNN1" | u32 layer_count | { u32 rows | u32 cols | u8 activation | f32[rows*cols] }* | u32 crc32
//! ```
//!
//! All integers and floats are little-endian, weights row-major with the
//! bias column last. The CRC covers every byte between the magic and the
//! checksum itself.

use std::path::Path;

use super::{Activation, Layer, Network};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MODEL_MAGIC: &[u8; 4] = b"MNN1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut payload = Vec::with_capacity(4 + net.parameter_count() * 4 + net.layers().len() * 9);
    payload.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        payload.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
        payload.extend_from_slice(&(layer.cols() as u32).to_le_bytes());
        payload.push(layer.activation().tag());
        for &w in layer.weights() {
            payload.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat("truncated model".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let (payload, crc) = bytes[4..].split_at(bytes.len() - 8);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::ModelFormat(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut cur = Cursor { bytes: payload, pos: 0 };
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let tag = cur.take(1)?[0];
        let activation =
            Activation::from_tag(tag).ok_or_else(|| Error::ModelFormat(format!("unknown activation tag {tag}")))?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::ModelFormat("layer size overflow".into()))?;
        let raw = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::ModelFormat("layer size overflow".into()))?,
        )?;
        let weights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        layers.push(Layer::new(rows, cols, weights, activation).map_err(|e| Error::ModelFormat(e.to_string()))?);
    }
    if cur.pos != payload.len() {
        return Err(Error::ModelFormat("trailing bytes after last layer".into()));
    }
    Network::new(layers).map_err(|e| Error::ModelFormat(e.to_string()))
}

pub fn save_model(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &encode_model(net))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    decode_model(&fsutil::read(path.as_ref())?)
}
