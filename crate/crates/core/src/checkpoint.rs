//! Flat little-endian binary containers for models and corpora.
//!
//! Every file starts with a four byte magic followed by `u32` header fields
//! and then raw `f64` (or `u32`) payload. Readers check the magic, the
//! header values they depend on, and the exact total length.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const TARGET_MAGIC: &[u8; 4] = b"SDFM";
pub const DRAFT_MAGIC: &[u8; 4] = b"SDFD";
pub const CORPUS_MAGIC: &[u8; 4] = b"SDFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn matrix(&mut self, m: &Matrix) -> &mut Self {
        self.f64s(m.data())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f64s(rows * cols)?)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails unless exactly `bytes` remain.
    pub fn expect_remaining(&self, bytes: usize) -> Result<()> {
        if self.remaining() != bytes {
            return Err(Error::Format(format!(
                "payload length {} does not match header (expected {bytes})",
                self.remaining()
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        self.expect_remaining(0)
    }
}
