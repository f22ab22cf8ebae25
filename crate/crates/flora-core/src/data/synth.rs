//! Synthetic benchmark generator.
//!
//! Produces a paired skeleton/semantic corpus with a controllable link
//! between the modalities. Per class `c`:
//!
//! * a semantic anchor `A_c` of `tokens × d_a` standard normal values,
//! * a skeleton centroid `mu_c = coupling * h_c + (1 - coupling) * g_c`,
//!   where `h_c = sqrt(tokens) * W @ mean_token(A_c)` is a fixed random
//!   linear image of the pooled anchor (unit-ish variance) and `g_c` is
//!   independent noise,
//! * `samples_per_class` skeleton rows `x = mu_c + spread * eps`.
//!
//! With `coupling = 1` and `spread = 0` every sample of a class collapses
//! exactly onto the linear image of its pooled anchor. The generator is a
//! pure function of its config (including the seed); the last `n_unseen`
//! class ids form the unseen set.

use serde::{Deserialize, Serialize};

use crate::data::fpack::{FeaturePack, PackKind};
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: u32,
    pub n_unseen: u32,
    pub samples_per_class: u32,
    /// Skeleton feature dim.
    pub d_s: u32,
    /// Semantic feature dim.
    pub d_a: u32,
    /// Semantic tokens per class.
    pub tokens: u32,
    /// Within-class sample spread (standard deviation around the centroid).
    pub spread: f64,
    /// How strongly skeleton centroids follow the semantic anchors, in [0, 1].
    pub coupling: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            n_unseen: 5,
            samples_per_class: 50,
            d_s: 64,
            d_a: 48,
            tokens: 4,
            spread: 0.3,
            coupling: 0.8,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.n_unseen == 0 || self.n_unseen >= self.n_classes {
            return Err(Error::Config(format!(
                "n_unseen must be in 1..{} (got {})",
                self.n_classes, self.n_unseen
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.d_s == 0 || self.d_a == 0 || self.tokens == 0 {
            return Err(Error::Config("dims and tokens must be positive".into()));
        }
        if !self.spread.is_finite() || self.spread < 0.0 {
            return Err(Error::Config(format!("spread must be >= 0 (got {})", self.spread)));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!(
                "coupling must be in [0, 1] (got {})",
                self.coupling
            )));
        }
        Ok(())
    }
}

/// Generate the paired packs and the class split.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(FeaturePack, FeaturePack, SplitSpec)> {
    cfg.validate()?;
    let n_classes = cfg.n_classes as usize;
    let d_s = cfg.d_s as usize;
    let d_a = cfg.d_a as usize;
    let tokens = cfg.tokens as usize;
    let per_class = cfg.samples_per_class as usize;

    let mut rng = Rng::seeded(cfg.seed);

    // Fixed cross-modal map, scaled so the image of a pooled anchor has
    // roughly unit per-coordinate variance.
    let w_scale = 1.0 / (d_a as f64).sqrt();
    let w: Vec<f64> = (0..d_s * d_a).map(|_| rng.standard_normal() * w_scale).collect();

    let mut semantic = Vec::with_capacity(n_classes * tokens * d_a);
    let mut centroids = Vec::with_capacity(n_classes * d_s);
    for _ in 0..n_classes {
        let anchor: Vec<f64> = (0..tokens * d_a).map(|_| rng.standard_normal()).collect();
        let mut pooled = vec![0.0; d_a];
        for row in anchor.chunks_exact(d_a) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        for p in pooled.iter_mut() {
            *p /= tokens as f64;
        }
        let token_gain = (tokens as f64).sqrt();
        let mut h = vec![0.0; d_s];
        for (i, hv) in h.iter_mut().enumerate() {
            let wrow = &w[i * d_a..(i + 1) * d_a];
            *hv = token_gain * wrow.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        }
        for &hv in &h {
            let g = rng.standard_normal();
            centroids.push(cfg.coupling * hv + (1.0 - cfg.coupling) * g);
        }
        semantic.extend(anchor);
    }

    let mut skeleton = Vec::with_capacity(n_classes * per_class * d_s);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let mu = &centroids[c * d_s..(c + 1) * d_s];
        for _ in 0..per_class {
            for &m in mu {
                skeleton.push((m + cfg.spread * rng.standard_normal()) as f32);
            }
            labels.push(c as u32);
        }
    }

    let skeleton_pack = FeaturePack::new(
        PackKind::Skeleton,
        1,
        cfg.d_s,
        labels,
        skeleton,
    )?;
    let semantic_pack = FeaturePack::new(
        PackKind::Semantic,
        cfg.tokens,
        cfg.d_a,
        (0..cfg.n_classes).collect(),
        semantic.into_iter().map(|v| v as f32).collect(),
    )?;
    let unseen: Vec<u32> = (cfg.n_classes - cfg.n_unseen..cfg.n_classes).collect();
    let split = SplitSpec::from_unseen(cfg.n_classes, unseen)?;
    Ok((skeleton_pack, semantic_pack, split))
}

/// Fraction of samples from `classes` that sit nearest to their own class
/// centroid (empirical per-class means), competing among `classes` only.
/// Used as a separability sanity check on generated packs.
pub fn nearest_centroid_accuracy(pack: &FeaturePack, classes: &[u32]) -> Result<f64> {
    if pack.tokens != 1 {
        return Err(Error::Evaluation(
            "nearest-centroid check expects a one-token-per-item pack".into(),
        ));
    }
    let d = pack.dim as usize;
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; d]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (i, &label) in pack.labels.iter().enumerate() {
        if let Some(ci) = classes.iter().position(|&c| c == label) {
            for (s, &v) in sums[ci].iter_mut().zip(pack.item(i)) {
                *s += v as f64;
            }
            counts[ci] += 1;
        }
    }
    for (ci, &c) in classes.iter().enumerate() {
        if counts[ci] == 0 {
            return Err(Error::SplitPackMismatch(format!("class {c} has no samples")));
        }
        for s in sums[ci].iter_mut() {
            *s /= counts[ci] as f64;
        }
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, &label) in pack.labels.iter().enumerate() {
        let Some(own) = classes.iter().position(|&c| c == label) else {
            continue;
        };
        let x = pack.item(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, mu) in sums.iter().enumerate() {
            let dist: f64 = x
                .iter()
                .zip(mu)
                .map(|(&xv, &m)| {
                    let d = xv as f64 - m;
                    d * d
                })
                .sum();
            if dist < best_d {
                best_d = dist;
                best = ci;
            }
        }
        total += 1;
        if best == own {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
