//! Little-endian helpers shared by the fixed-layout binary blobs
//! (`DGT1`, `PCA1`, `CBK1`, `VRP1`, `WGT1`, `SVM1`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_magic(magic: &[u8; 4]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn len(&mut self, v: usize) -> Result<&mut Self> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds u32 range")))?;
        Ok(self.u32(v))
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    /// Narrows to f32 on write.
    pub fn f64s_as_f32(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    format: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor on the first field.
    pub fn open(format: &'static str, magic: &[u8; 4], bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != magic {
            return Err(Error::MalformedHeader {
                format,
                reason: format!("missing magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let mut r = Reader {
            format,
            bytes,
            pos: 4,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            format: self.format,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed("truncated header"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Reads exactly `count` f32 values; a short or long payload is a hard error
    /// when `exact_tail` is set.
    pub fn f32s(&mut self, count: usize, exact_tail: bool) -> Result<Vec<f32>> {
        let avail = self.remaining();
        let need = count.checked_mul(4).ok_or_else(|| self.malformed("size overflow"))?;
        if avail < need || (exact_tail && avail != need) {
            return Err(Error::PayloadMismatch {
                expected: count,
                found: avail / 4,
            });
        }
        let raw = self.take(need)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s_as_f64(&mut self, count: usize, exact_tail: bool) -> Result<Vec<f64>> {
        Ok(self
            .f32s(count, exact_tail)?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    pub fn f64s(&mut self, count: usize, exact_tail: bool) -> Result<Vec<f64>> {
        let avail = self.remaining();
        let need = count.checked_mul(8).ok_or_else(|| self.malformed("size overflow"))?;
        if avail < need || (exact_tail && avail != need) {
            return Err(Error::PayloadMismatch {
                expected: count,
                found: avail / 8,
            });
        }
        let raw = self.take(need)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for (index, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
    }
    Ok(())
}
