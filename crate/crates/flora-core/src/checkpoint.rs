//! Parameter checkpoint container.
//!
//! Little-endian layout, sharing the discipline of the feature-pack format:
//!
//! ```text
//! magic "FLORACKP" (8 bytes) · version u32 = 1 · n_blocks u32
//! then per block:
//!   name_len u32 · name (UTF-8) · ndim u32 · dims (u32 each) · payload f64
//! ```
//!
//! Blocks are named tensors in insertion order; names are unique. Integer
//! metadata (widths, backbone codes) is stored as scalar blocks, exact for
//! values below 2^53.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"FLORACKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f64>) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::CkptDuplicateBlock(name.to_string()));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::CkptBlockMismatch(format!(
                "block {name:?} declares {numel} values, holds {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::CkptBlockMismatch(format!(
                "non-finite value at index {i} in block {name:?}"
            )));
        }
        self.blocks.push(Block { name: name.to_string(), dims: dims.to_vec(), data });
        Ok(())
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.push(name, &[1], vec![value])
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(name, t.shape(), t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| (b.dims.as_slice(), b.data.as_slice()))
            .ok_or_else(|| Error::CkptBlockMismatch(format!("missing block {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (dims, data) = self.get(name)?;
        if data.len() != 1 {
            return Err(Error::CkptBlockMismatch(format!(
                "block {name:?} has shape {dims:?}, expected a scalar"
            )));
        }
        Ok(data[0])
    }

    /// Scalar block holding a nonnegative integer (widths, counts, codes).
    pub fn scalar_usize(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
            return Err(Error::CkptBlockMismatch(format!(
                "block {name:?} holds {v}, expected a nonnegative integer"
            )));
        }
        Ok(v as usize)
    }

    /// Rebuild a (non-trainable) tensor from a block.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (dims, data) = self.get(name)?;
        Tensor::from_vec(dims.to_vec(), data.to_vec())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn block_dims(&self, name: &str) -> Result<&[usize]> {
        Ok(self.get(name)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - *off < n {
                return Err(Error::CkptTruncated(what.to_string()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic: [u8; 8] = take(&mut off, 8, "magic")?.try_into().expect("fixed slice");
        if &magic != CKPT_MAGIC {
            return Err(Error::CkptBadMagic { found: magic });
        }
        let read_u32 = |off: &mut usize, what: &str| -> Result<u32> {
            let b = take(off, 4, what)?;
            Ok(u32::from_le_bytes(b.try_into().expect("fixed slice")))
        };
        let version = read_u32(&mut off, "version")?;
        if version != CKPT_VERSION {
            return Err(Error::CkptVersion { found: version });
        }
        let n_blocks = read_u32(&mut off, "block count")?;
        let mut ckpt = Checkpoint::new();
        for bi in 0..n_blocks {
            let ctx = format!("block {bi} name");
            let name_len = read_u32(&mut off, &ctx)? as usize;
            let name_bytes = take(&mut off, name_len, &ctx)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::CkptBlockMismatch(format!("block {bi} name is not UTF-8")))?
                .to_string();
            let ndim = read_u32(&mut off, &name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut numel = 1u64;
            for _ in 0..ndim {
                let d = read_u32(&mut off, &name)? as u64;
                numel = numel.saturating_mul(d);
                dims.push(d as usize);
            }
            // Bound the payload before allocating (corrupt dims must not
            // force a huge allocation).
            let payload_bytes = numel.saturating_mul(8);
            if payload_bytes > (bytes.len() - off) as u64 {
                return Err(Error::CkptTruncated(format!("block {name:?} payload")));
            }
            let mut data = Vec::with_capacity(numel as usize);
            for chunk in take(&mut off, payload_bytes as usize, &name)?.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().expect("fixed slice")));
            }
            ckpt.push(&name, &dims, data)?;
        }
        if off != bytes.len() {
            return Err(Error::CkptTrailingBytes { extra: bytes.len() - off });
        }
        Ok(ckpt)
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io_at(path, e))
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}
