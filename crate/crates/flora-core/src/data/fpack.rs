//! Binary feature pack format.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size            field
//! 0       8               magic "FLORAFPK"
//! 8       4               version (u32, = 1)
//! 12      4               kind (u32: 0 = skeleton, 1 = semantic)
//! 16      4               n_items (u32, > 0)
//! 20      4               tokens per item M (u32, > 0)
//! 24      4               feature dim d (u32, > 0)
//! 28      4*n_items       labels (u32 each)
//! ...     4*n_items*M*d   features (f32 each, row-major item->token->dim)
//! ```
//!
//! Reading validates the header exhaustively (magic, version, kind, zero
//! extents, exact byte count) and rejects non-finite feature values, each
//! with its own error variant. Class names are in-memory metadata only; the
//! on-disk format does not carry them.

use std::path::Path;

use crate::error::{Error, Result};

pub const FPACK_MAGIC: &[u8; 8] = b"FLORAFPK";
pub const FPACK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackKind {
    Skeleton,
    Semantic,
}

impl PackKind {
    pub fn code(self) -> u32 {
        match self {
            PackKind::Skeleton => 0,
            PackKind::Semantic => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(PackKind::Skeleton),
            1 => Ok(PackKind::Semantic),
            other => Err(Error::PackKind { found: other }),
        }
    }
}

/// A set of fixed-size feature matrices with one class label per item.
///
/// Skeleton packs hold one token per item (a single pooled feature row per
/// sample); semantic packs hold one item per class with `tokens` feature
/// rows each, and their labels are the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub kind: PackKind,
    pub tokens: u32,
    pub dim: u32,
    pub labels: Vec<u32>,
    /// Row-major `n_items * tokens * dim` values.
    pub features: Vec<f32>,
    /// Optional display names; never serialized.
    pub class_names: Option<Vec<String>>,
}

impl FeaturePack {
    pub fn new(
        kind: PackKind,
        tokens: u32,
        dim: u32,
        labels: Vec<u32>,
        features: Vec<f32>,
    ) -> Result<Self> {
        let pack = Self { kind, tokens, dim, labels, features, class_names: None };
        pack.validate()?;
        Ok(pack)
    }

    pub fn n_items(&self) -> u32 {
        self.labels.len() as u32
    }

    fn item_len(&self) -> usize {
        self.tokens as usize * self.dim as usize
    }

    /// Feature matrix of one item as stored (f32).
    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.item_len();
        &self.features[i * len..(i + 1) * len]
    }

    /// Feature matrix of one item widened to f64 for computation.
    pub fn item_f64(&self, i: usize) -> Vec<f64> {
        self.item(i).iter().map(|&v| v as f64).collect()
    }

    /// Check structural invariants: nonzero extents, matching lengths, finite features.
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::PackZeroExtent { field: "n_items" });
        }
        if self.tokens == 0 {
            return Err(Error::PackZeroExtent { field: "tokens" });
        }
        if self.dim == 0 {
            return Err(Error::PackZeroExtent { field: "dim" });
        }
        let expect = self.labels.len() * self.item_len();
        if self.features.len() != expect {
            return Err(Error::Shape(format!(
                "pack declares {} feature values, holds {}",
                expect,
                self.features.len()
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::PackNonFinite { index: i });
        }
        if self.kind == PackKind::Semantic {
            for (i, &l) in self.labels.iter().enumerate() {
                if l as usize != i {
                    return Err(Error::PackLabels(format!(
                        "semantic labels must be the identity map, item {i} has label {l}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            28 + 4 * self.labels.len() + 4 * self.features.len(),
        );
        out.extend_from_slice(FPACK_MAGIC);
        out.extend_from_slice(&FPACK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        out.extend_from_slice(&self.n_items().to_le_bytes());
        out.extend_from_slice(&self.tokens.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |expected: usize, actual: usize| -> Result<()> {
            if actual < expected {
                Err(Error::PackTruncated { expected, actual })
            } else {
                Ok(())
            }
        };
        need(28, bytes.len())?;
        let magic: [u8; 8] = bytes[0..8].try_into().expect("fixed slice");
        if &magic != FPACK_MAGIC {
            return Err(Error::PackBadMagic { found: magic });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("fixed slice"));
        let version = u32_at(8);
        if version != FPACK_VERSION {
            return Err(Error::PackVersion { found: version });
        }
        let kind = PackKind::from_code(u32_at(12))?;
        let n_items = u32_at(16);
        let tokens = u32_at(20);
        let dim = u32_at(24);
        if n_items == 0 {
            return Err(Error::PackZeroExtent { field: "n_items" });
        }
        if tokens == 0 {
            return Err(Error::PackZeroExtent { field: "tokens" });
        }
        if dim == 0 {
            return Err(Error::PackZeroExtent { field: "dim" });
        }
        // Sizes as u64 so corrupt headers cannot overflow or force huge
        // allocations before the length check.
        let n_feat = n_items as u64 * tokens as u64 * dim as u64;
        let expected = 28u64 + 4 * n_items as u64 + 4 * n_feat;
        let expected_usize = usize::try_from(expected)
            .map_err(|_| Error::PackTruncated { expected: usize::MAX, actual: bytes.len() })?;
        match bytes.len().cmp(&expected_usize) {
            std::cmp::Ordering::Less => {
                return Err(Error::PackTruncated { expected: expected_usize, actual: bytes.len() })
            }
            std::cmp::Ordering::Greater => {
                return Err(Error::PackTrailingBytes { extra: bytes.len() - expected_usize })
            }
            std::cmp::Ordering::Equal => {}
        }

        let mut off = 28;
        let mut labels = Vec::with_capacity(n_items as usize);
        for _ in 0..n_items {
            labels.push(u32_at(off));
            off += 4;
        }
        let mut features = Vec::with_capacity(n_feat as usize);
        for chunk in bytes[off..].chunks_exact(4) {
            features.push(f32::from_le_bytes(chunk.try_into().expect("fixed slice")));
        }
        let pack = Self { kind, tokens, dim, labels, features, class_names: None };
        pack.validate()?;
        Ok(pack)
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
