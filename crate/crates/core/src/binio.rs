//! Little-endian binary readers/writers for the bank and volume file formats.

use std::io::{Read, Write};

use crate::{Error, Result};

pub struct Reader<R: Read> {
    inner: R,
    path: String,
    pub offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, path: &str) -> Self {
        Self {
            inner,
            path: path.to_string(),
            offset: 0,
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: self.path.clone(),
                    detail: "truncated file".into(),
                    offset: self.offset,
                }
            } else {
                Error::Io {
                    path: self.path.clone(),
                    source: e,
                }
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.fill(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn bad(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: detail.to_string(),
            offset: self.offset,
        }
    }
}

pub struct Writer<W: Write> {
    inner: W,
    path: String,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W, path: &str) -> Self {
        Self {
            inner,
            path: path.to_string(),
        }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|e| Error::Io {
            path: self.path.clone(),
            source: e,
        })
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        let mut bytes = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&bytes)
    }
}

/// FNV-1a over raw bytes; used for the bank identity hash stored in volumes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
