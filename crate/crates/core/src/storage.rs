//! Versioned binary container shared by checkpoints, embedding tables and
//! indexes.
//!
//! ```text
//! magic (8 bytes) | version u32 | manifest_len u64 | manifest JSON
//! | payload_len u64 | payload | crc32 u32 of all preceding bytes
//! ```
//! Integers are little-endian.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<M: Serialize>(magic: &[u8; 8], version: u32, manifest: &M, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(32 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<(M, Vec<u8>)> {
    let truncated = || Error::Format("file is truncated".into());
    if bytes.len() < 8 + 4 + 8 + 8 + 4 {
        return Err(truncated());
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Format(format!("unsupported version {found}, expected {version}")));
    }
    let mut pos = 12;
    let take_u64 = |pos: &mut usize| -> Result<usize> {
        let end = *pos + 8;
        let raw = bytes.get(*pos..end).ok_or_else(truncated)?;
        *pos = end;
        usize::try_from(u64::from_le_bytes(raw.try_into().expect("8 bytes"))).map_err(|_| truncated())
    };
    let mlen = take_u64(&mut pos)?;
    let manifest_bytes = bytes.get(pos..pos.checked_add(mlen).ok_or_else(truncated)?).ok_or_else(truncated)?;
    pos += mlen;
    let plen = take_u64(&mut pos)?;
    let payload_end = pos.checked_add(plen).ok_or_else(truncated)?;
    if bytes.len() != payload_end + 4 {
        return Err(if bytes.len() < payload_end + 4 {
            truncated()
        } else {
            Error::Format("trailing bytes after checksum".into())
        });
    }
    let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..payload_end]) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let manifest = serde_json::from_slice(manifest_bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    Ok((manifest, bytes[pos..payload_end].to_vec()))
}

pub fn write<M: Serialize>(path: &Path, magic: &[u8; 8], version: u32, manifest: &M, payload: &[u8]) -> Result<()> {
    fs::write(path, encode(magic, version, manifest, payload)?)?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<(M, Vec<u8>)> {
    decode(magic, version, &fs::read(path)?)
}

pub fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn push_u32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = u32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential little-endian reader over a payload.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("payload shorter than manifest declares".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format("payload longer than manifest declares".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFMT1";

    #[test]
    fn round_trip_and_corruption() {
        let mut payload = Vec::new();
        push_f32s(&mut payload, &[1.5, -2.0]);
        push_u32s(&mut payload, [7u32]);
        let bytes = encode(MAGIC, 1, &vec!["a".to_string()], &payload).unwrap();
        let (m, p): (Vec<String>, Vec<u8>) = decode(MAGIC, 1, &bytes).unwrap();
        assert_eq!(m, vec!["a".to_string()]);
        let mut c = Cursor::new(&p);
        assert_eq!(c.f32s(2).unwrap(), vec![1.5, -2.0]);
        assert_eq!(c.u32s(1).unwrap(), vec![7]);
        c.finish().unwrap();

        assert!(decode::<Vec<String>>(MAGIC, 2, &bytes).is_err());
        assert!(decode::<Vec<String>>(MAGIC, 1, &bytes[..bytes.len() - 3]).is_err());
        for i in [0, 20, bytes.len() - 6] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(decode::<Vec<String>>(MAGIC, 1, &bad).is_err(), "flip at {i}");
        }
    }
}
