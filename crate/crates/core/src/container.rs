//! Binary container shared by checkpoints, datasets and sample dumps.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u32` LE header length,
//! UTF-8 JSON header, then a payload of little-endian `f32` values. The header
//! carries a SHA-256 digest of the payload bytes.

use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 16;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rounds through `f32`, the precision of every stored payload.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn payload_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn payload_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Parse {
        what: "container header",
        detail: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_prefix(prefix: &[u8; PREFIX], magic: &[u8; 8], path: &Path) -> Result<usize> {
    if &prefix[..8] != magic {
        return Err(corrupt(
            path,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(u32::from_le_bytes(prefix[12..16].try_into().unwrap()) as usize)
}

fn parse_header<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<H> {
    serde_json::from_slice(bytes).map_err(|e| corrupt(path, format!("unreadable header: {e}")))
}

/// Splits a full container into its header and payload bytes.
pub fn decode<'a, H: DeserializeOwned>(bytes: &'a [u8], magic: &[u8; 8], path: &Path) -> Result<(H, &'a [u8])> {
    let prefix: &[u8; PREFIX] = bytes
        .get(..PREFIX)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| corrupt(path, "truncated before header"))?;
    let len = parse_prefix(prefix, magic, path)?;
    let header = bytes
        .get(PREFIX..PREFIX + len)
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    Ok((parse_header(header, path)?, &bytes[PREFIX + len..]))
}

/// Reads only the header from a stream; the payload is never touched.
pub fn read_header<H: DeserializeOwned>(reader: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<H> {
    let mut prefix = [0u8; PREFIX];
    reader
        .read_exact(&mut prefix)
        .map_err(|_| corrupt(path, "truncated before header"))?;
    let len = parse_prefix(&prefix, magic, path)?;
    let mut header = vec![0u8; len];
    reader
        .read_exact(&mut header)
        .map_err(|_| corrupt(path, "truncated header"))?;
    parse_header(&header, path)
}

pub fn verify_payload(payload: &[u8], digest: &str, expected_values: usize, path: &Path) -> Result<()> {
    if payload.len() != expected_values * 4 {
        return Err(corrupt(
            path,
            format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                expected_values * 4
            ),
        ));
    }
    if sha256_hex(payload) != digest {
        return Err(corrupt(path, "payload digest mismatch"));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
