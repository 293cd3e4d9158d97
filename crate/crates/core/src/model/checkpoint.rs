//! Binary container for named tensors plus a JSON metadata header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CLSMCKPT"
//! version    u32      1
//! meta_len   u64      length of the JSON metadata in bytes
//! meta       meta_len bytes of UTF-8 JSON
//! count      u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     product(dims) × f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! Values are stored as raw bits, so a save/load round trip is lossless.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLSMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl CheckpointFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let bad = |detail: String| Error::format("checkpoint", detail);
        let io = |e: std::io::Error| bad(format!("truncated: {e}"));
        let magic: [u8; 8] = read_exact(&mut r).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_exact(&mut r).map_err(io)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = u64::from_le_bytes(read_exact(&mut r).map_err(io)?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let ndim = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_exact(&mut r).map_err(io)?));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}
