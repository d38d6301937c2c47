//! Little-endian binary framing shared by the index and cluster-state files.
//!
//! Every file is `magic (8 bytes) | version u16 | payload | checksum u64`, where the
//! checksum is the first eight bytes (little-endian) of the SHA-256 digest of all
//! preceding bytes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u16) -> Self {
        let mut buf = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version and checksum; returns a reader positioned after the version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8], version: u16) -> Result<Self, CodecError> {
        if bytes.len() < 8 + 2 + 8 {
            return Err(CodecError::Corrupt("file too short".into()));
        }
        if &bytes[..8] != magic {
            return Err(CodecError::Corrupt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        if checksum(body) != stored {
            return Err(CodecError::Corrupt("checksum mismatch".into()));
        }
        let found = u16::from_le_bytes([body[8], body[9]]);
        if found != version {
            return Err(CodecError::Corrupt(format!(
                "unsupported version {found} (expected {version})"
            )));
        }
        Ok(Self { buf: body, pos: 10 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CodecError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::Corrupt("invalid utf-8".into()))
    }

    /// Upper bound check for element counts read from the file, so a corrupt
    /// count cannot trigger a huge allocation.
    pub fn count(&mut self, min_elem_size: usize) -> Result<usize, CodecError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| CodecError::Corrupt("count overflow".into()))?;
        if n.saturating_mul(min_elem_size.max(1)) > self.remaining() {
            return Err(CodecError::Corrupt(format!("count {n} exceeds file size")));
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::Corrupt(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CodecError> {
    Ok(fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let mut w = Writer::new(b"TESTMAGC", 3);
        w.u32(7);
        w.str("héllo");
        w.f64(-0.5);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TESTMAGC", 3).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "héllo");
        assert_eq!(r.f64().unwrap(), -0.5);
        r.finish().unwrap();
    }

    #[test]
    fn detects_damage() {
        let mut w = Writer::new(b"TESTMAGC", 1);
        w.u64(42);
        let bytes = w.finish();
        assert!(Reader::open(&bytes, b"OTHERMAG", 1).is_err());
        assert!(Reader::open(&bytes, b"TESTMAGC", 2).is_err());
        assert!(Reader::open(&bytes[..bytes.len() - 1], b"TESTMAGC", 1).is_err());
        let mut flipped = bytes.clone();
        flipped[12] ^= 1;
        assert!(Reader::open(&flipped, b"TESTMAGC", 1).is_err());
    }

    #[test]
    fn oversized_count_rejected() {
        let mut w = Writer::new(b"TESTMAGC", 1);
        w.u64(u64::MAX);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TESTMAGC", 1).unwrap();
        assert!(r.count(4).is_err());
    }
}
