//! `dstack` binary array format, shared by files on disk, spilled blocks and
//! the network protocol.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "DSTK"
//! 4       1           version = 1
//! 5       1           dtype   = 1 (float64, little endian)
//! 6       1           ndim
//! 7       8 * ndim    dims, u64 little endian
//! ...     8 * prod    payload, row-major f64 little endian
//! ```
//!
//! A block (list of tuple records) is framed as `u32 record_count`,
//! `u32 arity`, then `record_count * arity` dstack tensors in record order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSTK";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;
const HEADER_LEN: usize = 7;

/// One record: a k-tuple of tensors.
pub type Record = Vec<Tensor>;

pub fn encoded_len(t: &Tensor) -> usize {
    HEADER_LEN + 8 * t.ndim() + 8 * t.len()
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn framing(msg: impl Into<String>) -> Error {
    Error::Framing(msg.into())
}

/// Decode one tensor from the front of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(framing("dstack header truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(framing("bad dstack magic"));
    }
    if bytes[4] != VERSION {
        return Err(framing(format!("unsupported dstack version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(framing(format!("unsupported dstack dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(framing("dstack with zero dimensions"));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(framing("dstack dims truncated"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for k in 0..ndim {
        let at = HEADER_LEN + 8 * k;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        count = count
            .checked_mul(d)
            .ok_or_else(|| framing("dstack dims overflow"))?;
        dims.push(d as usize);
    }
    let payload_len = count
        .checked_mul(8)
        .ok_or_else(|| framing("dstack payload overflow"))? as usize;
    let end = dims_end
        .checked_add(payload_len)
        .ok_or_else(|| framing("dstack payload overflow"))?;
    if bytes.len() < end {
        return Err(framing(format!(
            "dstack payload needs {payload_len} bytes, only {} present",
            bytes.len() - dims_end
        )));
    }
    let data = bytes[dims_end..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_external(dims, data)?, end))
}

/// Decode exactly one tensor; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(framing(format!(
            "{} trailing bytes after dstack payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode(t))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    decode(&bytes)
}

pub fn encode_block(records: &[Record], out: &mut Vec<u8>) -> Result<()> {
    let arity = records.first().map_or(0, Vec::len);
    if records.iter().any(|r| r.len() != arity) {
        return Err(framing("records of one block must share their arity"));
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(arity as u32).to_le_bytes());
    for r in records {
        for t in r {
            encode_into(t, out);
        }
    }
    Ok(())
}

pub fn encode_block_vec(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_block(records, &mut out)?;
    Ok(out)
}

/// Decode a block from the front of `bytes`; returns records and bytes used.
pub fn decode_block_prefix(bytes: &[u8]) -> Result<(Vec<Record>, usize)> {
    if bytes.len() < 8 {
        return Err(framing("block header truncated"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let arity = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut at = 8;
    // Each tensor takes at least HEADER_LEN + 16 bytes; bound the allocation.
    let max_tensors = (bytes.len() - at) / (HEADER_LEN + 16);
    if count.saturating_mul(arity) > max_tensors {
        return Err(framing("block claims more tensors than bytes allow"));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rec = Vec::with_capacity(arity);
        for _ in 0..arity {
            let (t, used) = decode_prefix(&bytes[at..])?;
            at += used;
            rec.push(t);
        }
        records.push(rec);
    }
    Ok((records, at))
}

pub fn decode_block(bytes: &[u8]) -> Result<Vec<Record>> {
    let (records, used) = decode_block_prefix(bytes)?;
    if used != bytes.len() {
        return Err(framing("trailing bytes after block"));
    }
    Ok(records)
}
