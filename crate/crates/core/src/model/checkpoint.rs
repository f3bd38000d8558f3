//! Flat named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `MSNICKPT` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | header length `n` (`u64`) |
//! | n     | UTF-8 JSON header: `{"meta": ..., "tensors": [{"name", "shape"}...]}` |
//! | ...   | tensor payloads in header order, `f64` little-endian |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MSNICKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let header = Header {
        meta: c.meta.clone(),
        tensors: c.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * c.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &c.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(u4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u8b).map_err(|_| bad("truncated header length"))?;
    let n = u64::from_le_bytes(u8b) as usize;
    if n > r.len() {
        return Err(bad("header longer than file"));
    }
    let header: Header = serde_json::from_slice(&r[..n]).map_err(|e| bad(format!("header: {e}")))?;
    r = &r[n..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let count: usize = e.shape.iter().product();
        if r.len() < count * 8 {
            return Err(bad(format!("payload of {} truncated", e.name)));
        }
        let data = r[..count * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        r = &r[count * 8..];
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(Container { meta: header.meta, tensors })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode_container(c)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let c = Container {
            meta: serde_json::json!({"step": 3}),
            tensors: vec![("a".into(), Tensor::vector(&[1.5, -2.0])), ("b".into(), Tensor::scalar(f64::MIN_POSITIVE))],
        };
        let bytes = encode_container(&c).unwrap();
        assert_eq!(decode_container(&bytes).unwrap(), c);
        assert!(decode_container(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_container(&wrong).is_err());
    }
}
