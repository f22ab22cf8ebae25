//! Neighbor-aware semantic attunement.
//!
//! Each class's semantic feature matrix is refined in one shot by adding a
//! scaled, similarity-weighted sum of its top-k neighbor classes:
//!
//! ```text
//! O_y = F_y + (tau / k) * sum_{i in topk(y)} w_i * F_i
//! ```
//!
//! Neighbors are ranked by cosine similarity between token-mean-pooled
//! features, computed once on the raw (pre-attunement) inputs and never
//! iterated. Weights are the raw cosine scores; negatively correlated
//! neighbors keep their negative weight (no clamping). `k = 0` disables the
//! step entirely.

use serde::{Deserialize, Serialize};

use crate::data::fpack::{FeaturePack, PackKind};
use crate::error::{Error, Result};

/// Token pooling used to compare classes. Mean is the only strategy; the
/// config key exists so run files state it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttuneConfig {
    /// Neighbor count; 0 skips attunement.
    pub k: u32,
    /// Aggregation strength; 0 leaves features unchanged.
    pub tau: f64,
    pub pooling: Pooling,
}

impl Default for AttuneConfig {
    fn default() -> Self {
        Self { k: 5, tau: 0.5, pooling: Pooling::Mean }
    }
}

impl AttuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config("attune tau must be finite".into()));
        }
        Ok(())
    }
}

/// The top-k neighborhood of one class: (class id, cosine weight) pairs in
/// descending weight order, anchor excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    anchor: usize,
    entries: Vec<(usize, f64)>,
}

impl NeighborSet {
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

/// Mean over the token axis of a row-major `tokens x dim` matrix.
///
/// When every row is bit-identical (the expanded-skeleton case) the first
/// row is returned unchanged, so expand-then-pool is exact.
pub fn pool_tokens(mat: &[f64], tokens: usize, dim: usize) -> Result<Vec<f64>> {
    if tokens == 0 || mat.len() != tokens * dim {
        return Err(Error::Shape(format!(
            "pool_tokens: {} values is not a {tokens} x {dim} matrix",
            mat.len()
        )));
    }
    let first = &mat[..dim];
    if mat.chunks_exact(dim).all(|row| row == first) {
        return Ok(first.to_vec());
    }
    let mut out = vec![0.0; dim];
    for row in mat.chunks_exact(dim) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= tokens as f64;
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64], who: usize, other: usize) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        let z = if na == 0.0 { who } else { other };
        return Err(Error::Numeric(format!("zero-norm pooled semantic feature for class {z}")));
    }
    Ok(dot / (na * nb))
}

/// The `k` classes most cosine-similar to `anchor` (anchor excluded), ties
/// broken by lower class id.
pub fn topk_neighbors(anchor: usize, pooled: &[Vec<f64>], k: usize) -> Result<NeighborSet> {
    let n = pooled.len();
    if anchor >= n {
        return Err(Error::Config(format!("anchor class {anchor} out of range 0..{n}")));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::Config(format!(
            "neighbor count k={k} out of range 1..={}",
            n - 1
        )));
    }
    let mut scored = Vec::with_capacity(n - 1);
    for (id, f) in pooled.iter().enumerate() {
        if id == anchor {
            continue;
        }
        scored.push((id, cosine(&pooled[anchor], f, anchor, id)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("cosine scores are finite").then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(NeighborSet { anchor, entries: scored })
}

/// Apply the aggregation formula to one class. `classes` holds the raw
/// (pre-attunement) feature matrices of all classes, each `tokens * dim`
/// long; the neighbor weights scale whole matrices.
pub fn attune(
    classes: &[Vec<f64>],
    neighbors: &NeighborSet,
    tau: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let anchor = &classes[neighbors.anchor];
    let mut out = anchor.clone();
    if tau == 0.0 {
        return Ok(out);
    }
    let scale = tau / k as f64;
    for &(id, w) in &neighbors.entries {
        let f = &classes[id];
        if f.len() != anchor.len() {
            return Err(Error::Shape(format!(
                "class {id} feature length {} differs from anchor length {}",
                f.len(),
                anchor.len()
            )));
        }
        let sw = scale * w;
        for (o, v) in out.iter_mut().zip(f) {
            *o += sw * v;
        }
    }
    Ok(out)
}

/// Attune every class of a semantic feature set held as f64 matrices.
/// `k = 0` returns the input unchanged.
pub fn attune_all(
    classes: &[Vec<f64>],
    tokens: usize,
    dim: usize,
    cfg: &AttuneConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if cfg.k == 0 {
        return Ok(classes.to_vec());
    }
    let pooled = classes
        .iter()
        .map(|c| pool_tokens(c, tokens, dim))
        .collect::<Result<Vec<_>>>()?;
    let k = cfg.k as usize;
    let mut out = Vec::with_capacity(classes.len());
    for y in 0..classes.len() {
        let neighbors = topk_neighbors(y, &pooled, k)?;
        out.push(attune(classes, &neighbors, cfg.tau, k)?);
    }
    Ok(out)
}

/// Attune a semantic pack, producing a new pack with the same labels and
/// names. Storage is 32-bit, so exported packs round the refined features.
pub fn attune_pack(pack: &FeaturePack, cfg: &AttuneConfig) -> Result<FeaturePack> {
    if pack.kind != PackKind::Semantic {
        return Err(Error::Config("attunement applies to semantic packs only".into()));
    }
    let classes: Vec<Vec<f64>> = (0..pack.n_items() as usize).map(|i| pack.item_f64(i)).collect();
    let refined = attune_all(&classes, pack.tokens as usize, pack.dim as usize, cfg)?;
    let features: Vec<f32> = refined.iter().flatten().map(|&v| v as f32).collect();
    let mut out = FeaturePack::new(
        pack.kind,
        pack.tokens,
        pack.dim,
        pack.labels.clone(),
        features,
    )?;
    out.class_names = pack.class_names.clone();
    Ok(out)
}
