//! Binary checkpoint container for named f32 tensors.
//!
//! Layout: magic `PIPC`, format version `u32` LE, tensor count `u32` LE,
//! then per tensor: name length `u16` LE + UTF-8 name, rank `u8`, dims as
//! `u64` LE each, dtype tag `u8` (0 = 32-bit float), payload as `f32` LE;
//! finally a CRC32 (IEEE) of every preceding byte, `u32` LE. The CRC is
//! verified before any tensor is parsed, so corrupted or truncated files
//! are refused outright. Values round-trip through raw bits, making
//! save-then-load bit-exact.

use std::path::Path;

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Format version written by this build.
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PIPC";
const DTYPE_F32: u8 = 0;

/// Serialize named tensors into checkpoint bytes.
pub fn encode(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::invalid("checkpoint", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid("checkpoint", format!("tensor name too long: {name:?}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::invalid("checkpoint", "tensor rank too large"))?;
        out.push(rank);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parse checkpoint bytes; CRC and structure are fully validated.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_at(bytes, "")
}

fn decode_at(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let fail = |detail: String| Error::Format { path: path.to_string(), detail };
    if bytes.len() < MAGIC.len() + 4 + 4 + 4 {
        return Err(fail("file too short to be a checkpoint".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic: not a checkpoint file".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(fail(format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")));
    }

    let mut pos = 4;
    let version = read_u32(body, &mut pos).ok_or_else(|| fail("truncated version".into()))?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = read_u32(body, &mut pos).ok_or_else(|| fail("truncated tensor count".into()))?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u16(body, &mut pos).ok_or_else(|| fail("truncated name length".into()))? as usize;
        let name_bytes = take(body, &mut pos, name_len).ok_or_else(|| fail("truncated name".into()))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = *take(body, &mut pos, 1).ok_or_else(|| fail("truncated rank".into()))?.first().unwrap() as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u64(body, &mut pos).ok_or_else(|| fail("truncated dims".into()))?;
            shape.push(usize::try_from(d).map_err(|_| fail("dimension overflows usize".into()))?);
        }
        let dtype = *take(body, &mut pos, 1).ok_or_else(|| fail("truncated dtype".into()))?.first().unwrap();
        if dtype != DTYPE_F32 {
            return Err(fail(format!("unsupported dtype tag {dtype}")));
        }
        let numel: usize = shape.iter().product();
        let payload = take(body, &mut pos, numel * 4).ok_or_else(|| fail("truncated payload".into()))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data).map_err(|e| fail(e.to_string()))?));
    }
    if pos != body.len() {
        return Err(fail(format!("{} trailing bytes after last tensor", body.len() - pos)));
    }
    Ok(entries)
}

/// Write a checkpoint file.
pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, encode(entries)?)?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_at(&bytes, &path.display().to_string())
}

/// Find an entry by name.
pub fn lookup<'a>(entries: &'a [(String, Tensor<f32>)], name: &str) -> Option<&'a Tensor<f32>> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

fn read_u16(b: &[u8], pos: &mut usize) -> Option<u16> {
    take(b, pos, 2).map(|s| u16::from_le_bytes(s.try_into().unwrap()))
}

fn read_u32(b: &[u8], pos: &mut usize) -> Option<u32> {
    take(b, pos, 4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
}

fn read_u64(b: &[u8], pos: &mut usize) -> Option<u64> {
    take(b, pos, 8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
}

fn take<'a>(b: &'a [u8], pos: &mut usize, n: usize) -> Option<&'a [u8]> {
    let end = pos.checked_add(n)?;
    if end > b.len() {
        return None;
    }
    let s = &b[*pos..end];
    *pos = end;
    Some(s)
}

/// CRC32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
