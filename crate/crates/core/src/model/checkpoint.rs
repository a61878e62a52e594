//! Checkpoint files.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic       4 bytes  b"AVRC"
//! version     u32      1
//! echo_len    u32      byte length of the config echo
//! echo        bytes    UTF-8 text (the run config as `key = value` lines)
//! n_tensors   u32
//! per tensor:
//!   name_len  u32
//!   name      bytes    UTF-8, one of transform, temporal_kernel, classifier,
//!                      attn_hidden, attn_out (in this order)
//!   ndim      u32
//!   dims      u64 × ndim
//!   data      f64 × product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use super::{ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVRC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.config_echo.len() as u32);
        buf.extend_from_slice(self.config_echo.as_bytes());
        put_u32(&mut buf, PARAM_NAMES.len() as u32);
        for (name, t) in PARAM_NAMES.iter().zip(self.params.tensors()) {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let echo_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: config echo is not UTF-8", path.display())))?;
        let n = r.u32()? as usize;
        if n != PARAM_NAMES.len() {
            return Err(Error::Data(format!("{}: expected 5 tensors, found {n}", path.display())));
        }
        let mut tensors = Vec::with_capacity(n);
        for expected in PARAM_NAMES {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            if name != expected.as_bytes() {
                return Err(Error::Data(format!(
                    "{}: expected tensor {expected:?}, found {:?}",
                    path.display(),
                    String::from_utf8_lossy(name)
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Data("dimension overflow".into()))?);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{}: trailing bytes after tensors", path.display())));
        }
        Ok(Self {
            params: ModelParams::from_tensors(tensors)?,
            config_echo,
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            detail: format!("need {n} bytes at offset {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
