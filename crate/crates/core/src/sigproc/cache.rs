//! Flat binary cache of preprocessed vectors.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 8    | magic `LEADIPP1`           |
//! | 8      | 4    | `count` (u32)              |
//! | 12     | 4    | `length` (u32)             |
//! | 16     | 4·count·length | f32 payload, row-major |

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"LEADIPP1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated cache: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("row {row} has length {len}, expected {expected}")]
    RaggedRows { row: usize, len: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(rows: &[Vec<f32>]) -> Result<Vec<u8>, CacheError> {
    let length = rows.first().map_or(0, Vec::len);
    for (row, r) in rows.iter().enumerate() {
        if r.len() != length {
            return Err(CacheError::RaggedRows { row, len: r.len(), expected: length });
        }
    }
    let mut out = Vec::with_capacity(16 + 4 * rows.len() * length);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(length as u32).to_le_bytes());
    for v in rows.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Vec<f32>>, CacheError> {
    if bytes.len() < 16 {
        return Err(CacheError::Truncated { expected: 16, actual: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let length = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(length)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or(CacheError::Truncated { expected: usize::MAX, actual: bytes.len() })?;
    if bytes.len() != expected {
        return Err(CacheError::Truncated { expected, actual: bytes.len() });
    }
    let payload = &bytes[16..];
    Ok((0..count)
        .map(|r| {
            payload[r * length * 4..(r + 1) * length * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

pub fn write(path: &std::path::Path, rows: &[Vec<f32>]) -> Result<(), CacheError> {
    std::fs::write(path, encode(rows)?)?;
    Ok(())
}

pub fn read(path: &std::path::Path) -> Result<Vec<Vec<f32>>, CacheError> {
    decode(&std::fs::read(path)?)
}
