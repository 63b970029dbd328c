//! Parameter checkpoints.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "LFCKPT\0\0"
//! version u32      1
//! count   u32
//! repeated count times:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank, data f32 × prod(dims)
//! ```
//!
//! A JSON manifest next to the binary records the architecture, step count and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: serde_json::Value,
    pub step: u64,
    pub seed: u64,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn encode<S: Scalar>(params: &[&Param<S>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

/// Decode into named tensors, in file order.
pub fn decode<S: Scalar>(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<S>)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8) != Some(&MAGIC[..]) {
        return Err("bad magic".into());
    }
    let version = c.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32().ok_or("truncated header")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32().ok_or("truncated name length")? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or("truncated name")?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rank = c.u32().ok_or("truncated rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or("truncated dims")?;
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4).ok_or("truncated data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| S::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        out.push((name, Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn save<S: Scalar>(path: &Path, params: &[&Param<S>], manifest: &Manifest) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

/// Load a checkpoint into `params`, matching by name and shape.
pub fn load<S: Scalar>(path: &Path, params: Vec<&mut Param<S>>) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode::<S>(&bytes).map_err(|r| Error::format(path, r))?;
    if tensors.len() != params.len() {
        return Err(Error::format(
            path,
            format!("{} tensors for {} parameters", tensors.len(), params.len()),
        ));
    }
    for p in params {
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(path, format!("shape of {} differs", p.name)));
        }
        p.value = t.clone();
        p.zero_grad();
    }
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let p = Param::new("w", Tensor::<f32>::from_vec(&[2], vec![1.0, -0.5]).unwrap());
        let bytes = encode(&[&p]);
        assert_eq!(&bytes[..8], b"LFCKPT\0\0");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(bytes[20], b'w');
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &2u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 37);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Param::new("a", Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = Param::new("b", Tensor::<f32>::from_vec(&[1], vec![-7.25]).unwrap());
        let manifest = Manifest {
            format_version: VERSION,
            architecture: serde_json::json!({"kind": "test"}),
            step: 12,
            seed: 3,
        };
        save(&path, &[&a, &b], &manifest).unwrap();
        let mut a2 = Param::new("a", Tensor::<f32>::zeros(&[2, 2]));
        let mut b2 = Param::new("b", Tensor::<f32>::zeros(&[1]));
        let m = load(&path, vec![&mut b2, &mut a2]).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(a2.value, a.value);
        assert_eq!(b2.value, b.value);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = Param::new("w", Tensor::<f32>::zeros(&[3]));
        let bytes = encode(&[&p]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"NOTACKPT").is_err());
    }
}
