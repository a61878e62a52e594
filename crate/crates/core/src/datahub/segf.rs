//! `SEGF` segment-feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size      | field                      |
//! |--------|-----------|----------------------------|
//! | 0      | 4         | magic `b"SEGF"`            |
//! | 4      | 4         | version (`u32`, = 1)       |
//! | 8      | 4         | segment count T (`u32`)    |
//! | 12     | 4         | feature dim d_in (`u32`)   |
//! | 16     | 4·T·d_in  | `f32` values, row-major    |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

pub const MAGIC: [u8; 4] = *b"SEGF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(features: &Tensor) -> Result<Vec<u8>> {
    let (t, d) = features.require_matrix("write_feature_file")?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dim_u32(t)?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("dimension {n} exceeds u32")))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!("{} header bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let t = word(8) as usize;
    let d = word(12) as usize;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated(format!("header claims {t}x{d}")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(truncated(format!("expected {expected} payload bytes, found {}", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_feature_file(features: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(features)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every value to the nearest `f32`, so in-memory features equal what
/// a SEGF round trip yields.
pub fn quantize(features: &mut Tensor) {
    features.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
