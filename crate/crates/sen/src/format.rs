//! Shared container layout: 8-byte magic, u64 LE header length, JSON header,
//! then a little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Error, Result};

pub fn write_container<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|source| Error::Json { path: path.into(), source })?;
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |r: std::io::Result<()>| r.map_err(io_err(path));
    io(w.write_all(magic))?;
    io(w.write_all(&(json.len() as u64).to_le_bytes()))?;
    io(w.write_all(&json))?;
    io(w.write_all(payload))?;
    io(w.flush())
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let bad = |message: &str| Error::Format { path: path.into(), message: message.into() };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad(&format!("not a {} file", String::from_utf8_lossy(magic))));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(&bytes[16..end]).map_err(|source| Error::Json { path: path.into(), source })?;
    Ok((header, bytes[end..].to_vec()))
}

pub fn f64s_to_bytes(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn u64s_to_bytes(values: impl IntoIterator<Item = u64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
}

pub fn bytes_to_u64s(bytes: &[u8]) -> Vec<u64> {
    bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
}
