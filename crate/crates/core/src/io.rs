//! Binary container helpers: magic bytes, format version, little-endian
//! fields and a trailing 64-bit checksum (first 8 bytes of SHA-256 over
//! everything before it).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn checksum64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(sha256(bytes)[..8].try_into().unwrap())
}

/// 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    format!(
        "{:016x}",
        u64::from_be_bytes(sha256(bytes)[..8].try_into().unwrap())
    )
}

/// Which run configuration and seed produced an artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("provenance serializes")
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> crate::Result<Provenance> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::format(path, format!("provenance block: {e}")))
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, values: impl IntoIterator<Item = f32>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// `u32` length followed by the bytes.
    pub fn block(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum64(&self.buf);
        self.u64(sum);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub struct Reader<'a> {
    path: &'a Path,
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic, checksum and version, leaving the cursor after the
    /// version field.
    pub fn open(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checksum { path: path.into() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if &body[..4] != magic {
            return Err(Error::format(path, "bad magic bytes"));
        }
        if checksum64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checksum { path: path.into() });
        }
        let mut r = Reader { path, body, pos: 4 };
        let found = r.u32()?;
        if found != version {
            return Err(Error::Version {
                path: path.into(),
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(Error::format(self.path, "unexpected end of data"));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
