//! `.t32` binary tensor files.
//!
//! Layout: magic `T32\0`, `u32` rank, `rank × u32` dims, then the elements
//! as little-endian `f32` in row-major order. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{EdmaeError, Result};
use crate::tensor::Tensor;

pub const T32_MAGIC: [u8; 4] = *b"T32\0";

pub fn encode_t32(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(&T32_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor that reports the failing byte offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], file: &'a str) -> Self {
        Self { buf, pos: 0, file }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> EdmaeError {
        EdmaeError::Parse {
            file: self.file.to_string(),
            offset: self.pos,
            message: message.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn t32(&mut self) -> Result<Tensor<f32>> {
        let start = self.pos;
        if self.bytes(4, "magic")? != T32_MAGIC {
            self.pos = start;
            return Err(self.error("bad magic, expected T32\\0"));
        }
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.error(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| self.error(format!("dimensions {shape:?} overflow")))?;
        let raw = self.bytes(numel * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_t32(buf: &[u8], file: &str) -> Result<Tensor<f32>> {
    let mut r = Reader::new(buf, file);
    let t = r.t32()?;
    if !r.at_end() {
        return Err(r.error("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn save_t32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_t32(t)).map_err(|e| EdmaeError::io(path, e))
}

pub fn load_t32(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| EdmaeError::io(path, e))?;
    decode_t32(&buf, &path.display().to_string())
}
