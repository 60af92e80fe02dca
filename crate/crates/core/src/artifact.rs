//! Binary artifact container and reproducibility helpers.
//!
//! Layout: 8-byte ASCII magic, `u32` little-endian header length, UTF-8 JSON
//! header of that length, then a little-endian `f32` (or `f64`) payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    write_bytes(path, &out)
}

/// Returns the parsed header and the raw payload bytes.
pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(bad(&format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + len {
        return Err(bad("truncated header"));
    }
    let header = serde_json::from_slice(&bytes[12..12 + len])?;
    Ok((header, bytes[12 + len..].to_vec()))
}

/// First 8 bytes of a file, for dispatching on artifact kind.
pub fn sniff_magic(path: &Path) -> Result<[u8; 8]> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes
        .get(..8)
        .and_then(|m| m.try_into().ok())
        .ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            reason: "file too short".into(),
        })
}

pub fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub fn f64_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Read `count` little-endian f32 values starting at `*offset`, advancing it.
pub fn take_f32(payload: &[u8], offset: &mut usize, count: usize) -> Result<Vec<f64>> {
    let end = *offset + count * 4;
    let slice = payload
        .get(*offset..end)
        .ok_or_else(|| Error::data(format!("payload truncated: need {} f32 values", count)))?;
    *offset = end;
    Ok(slice
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

pub fn take_f64(payload: &[u8], offset: &mut usize, count: usize) -> Result<Vec<f64>> {
    let end = *offset + count * 8;
    let slice = payload
        .get(*offset..end)
        .ok_or_else(|| Error::data(format!("payload truncated: need {} f64 values", count)))?;
    *offset = end;
    Ok(slice
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Short stable hash of any serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic generator for `seed`, with `stream` selecting an
/// independent sequence (one per consumer).
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let payload = f32_bytes([1.5, -2.0, 0.25]);
        write_container(&path, b"TESTMAG1", &serde_json::json!({"n": 3}), &payload).unwrap();
        let (h, p): (serde_json::Value, _) = read_container(&path, b"TESTMAG1").unwrap();
        assert_eq!(h["n"], 3);
        let mut off = 0;
        assert_eq!(take_f32(&p, &mut off, 3).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(take_f32(&p, &mut off, 1).is_err());
        assert!(read_container::<serde_json::Value>(&path, b"OTHERMG1").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"seed": 7}));
        assert_eq!(a, config_hash(&serde_json::json!({"seed": 7})));
        assert_ne!(a, config_hash(&serde_json::json!({"seed": 8})));
        assert_eq!(a.len(), 16);
    }
}
