//! Parameter checkpoints.
//!
//! Layout: `PACTCKPT` magic, u32 LE manifest length, JSON manifest
//! (`{"params": [{"name", "shape"}...], "meta": ...}`), the parameters as raw
//! little-endian `f32` in manifest order, then a CRC32 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PACTCKPT";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<Entry>,
    meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn encode(params: &[(String, Tensor<f32>)], meta: &serde_json::Value) -> Result<Vec<u8>> {
    let manifest = Manifest {
        params: params
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| corrupt(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in params {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub type Decoded = (Vec<(String, Tensor<f32>)>, serde_json::Value);

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("CRC mismatch"));
    }
    let mlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body.get(12..12 + mlen).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
    let mut off = 12 + mlen;
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        let raw = body
            .get(off..off + 4 * n)
            .ok_or_else(|| corrupt(format!("truncated blob for {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((e.name, Tensor::new(&e.shape, data)?));
        off += 4 * n;
    }
    if off != body.len() {
        return Err(corrupt("trailing bytes after parameter blobs"));
    }
    Ok((params, manifest.meta))
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)], meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Decoded> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let params = vec![
            ("a.w".to_string(), Tensor::new(&[2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap()),
            ("a.b".to_string(), Tensor::new(&[1], vec![7.0f32]).unwrap()),
        ];
        let meta = serde_json::json!({"depth": 2});
        let bytes = encode(&params, &meta).unwrap();
        let (back, m) = decode(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(m, meta);

        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
