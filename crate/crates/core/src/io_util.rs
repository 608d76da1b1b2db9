//! Little-endian binary readers/writers for the versioned file containers,
//! plus the FNV-1a content hash used to detect corrupted or mismatched files.

use crate::error::{Error, Result};
use std::io::{Read, Write};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice. Used as the content hash in weight and
/// compressed-model containers and as a stable id for catalogs and configs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a of an f32 slice viewed as little-endian bytes.
pub fn fnv1a_f32(values: &[f32]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for &b in &v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Buffered writer that records every byte into a running FNV-1a state so a
/// trailer hash can be appended at the end.
pub struct HashWriter<W: Write> {
    inner: W,
    hash: u64,
    written: u64,
}

impl<W: Write> HashWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, hash: FNV_OFFSET, written: 0 }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        for &b in bytes {
            self.hash ^= b as u64;
            self.hash = self.hash.wrapping_mul(FNV_PRIME);
        }
        self.written += bytes.len() as u64;
        self.inner.write_all(bytes)?;
        Ok(())
    }

    pub fn write_u8(&mut self, v: u8) -> Result<()> {
        self.write_bytes(&[v])
    }

    pub fn write_u32(&mut self, v: u32) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_u64(&mut self, v: u64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_i64(&mut self, v: i64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f32(&mut self, v: f32) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f64(&mut self, v: f64) -> Result<()> {
        self.write_bytes(&v.to_le_bytes())
    }

    pub fn write_f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        for v in vs {
            self.write_f32(*v)?;
        }
        Ok(())
    }

    /// Length-prefixed UTF-8 string.
    pub fn write_str(&mut self, s: &str) -> Result<()> {
        self.write_u32(s.len() as u32)?;
        self.write_bytes(s.as_bytes())
    }

    pub fn bytes_written(&self) -> u64 {
        self.written
    }

    /// Appends the running hash as the final 8 bytes and flushes.
    pub fn finish(mut self) -> Result<()> {
        let h = self.hash;
        self.inner.write_all(&h.to_le_bytes())?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reader over an in-memory container image; verifies the trailer hash up
/// front so later reads can assume intact bytes.
pub struct HashReader {
    buf: Vec<u8>,
    pos: usize,
    end: usize,
}

impl HashReader {
    /// Consumes the full stream, checks the FNV-1a trailer, and positions the
    /// cursor at the start of the payload.
    pub fn new<R: Read>(mut inner: R) -> Result<Self> {
        let mut buf = Vec::new();
        inner.read_to_end(&mut buf)?;
        if buf.len() < 8 {
            return Err(Error::Format("container shorter than hash trailer".into()));
        }
        let end = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[end..].try_into().unwrap());
        let actual = fnv1a(&buf[..end]);
        if stored != actual {
            return Err(Error::Format(format!(
                "content hash mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        Ok(Self { buf, pos: 0, end })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.end {
            return Err(Error::Format("unexpected end of container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn read_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        Ok(self.take(n)?.to_vec())
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.read_f32()?);
        }
        Ok(out)
    }

    pub fn read_str(&mut self) -> Result<String> {
        let n = self.read_u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string in container".into()))
    }

    pub fn remaining(&self) -> usize {
        self.end - self.pos
    }
}
