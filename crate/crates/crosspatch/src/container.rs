//! Binary container shared by checkpoint, crosscoder, and subspace files.
//!
//! Layout: 8 magic bytes, little-endian u64 header length, UTF-8 JSON header,
//! then a packed little-endian f32 payload. The header schema is owned by each
//! caller; this module only handles framing and the payload round trip.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XPCK0001";
pub const CROSSCODER_MAGIC: &[u8; 8] = b"XCCD0001";
pub const SUBSPACE_MAGIC: &[u8; 8] = b"XPCA0001";

/// Serialize a container to bytes. Deterministic for identical inputs.
pub fn to_bytes(magic: &[u8; 8], header_json: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_file(path: &Path, magic: &[u8; 8], header_json: &[u8], payload: &[f32]) -> Result<()> {
    let bytes = to_bytes(magic, header_json, payload);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse a container, checking the magic and that the payload is whole f32s.
pub fn from_bytes(magic: &[u8; 8], bytes: &[u8]) -> Result<(Vec<u8>, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        let found = bytes.get(..8).unwrap_or(&[]);
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16 + header_len;
    if bytes.len() < body_start {
        return Err(Error::TruncatedPayload {
            needed: body_start,
            have: bytes.len(),
        });
    }
    let header = bytes[16..body_start].to_vec();
    let payload_bytes = &bytes[body_start..];
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::TruncatedPayload {
            needed: body_start + (payload_bytes.len() / 4 + 1) * 4,
            have: bytes.len(),
        });
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn read_file(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(magic, &bytes)
}

/// SHA-256 of a byte string, hex-encoded. Used for artifact provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}
