//! Cross-modal alignment: a pair of variational autoencoders (one per
//! modality) trained with intra- and cross-reconstruction losses plus a
//! geometric consistency penalty that pulls latent means and variances of
//! paired items together. A standard-Gaussian KL penalty is available as an
//! ablation baseline.
//!
//! Shapes: one item is `tokens x dim` (skeleton rows are replicated along
//! the token axis to match the semantic token count). A batch of B items is
//! flattened to a single `(B * tokens) x dim` matrix so every tape op stays
//! two-dimensional; encoders act row-wise, so this is exact.
//!
//! Reconstruction terms are per-path mean squared errors, summed over the
//! four paths. The geometric and KL penalties sum over tokens and latent
//! dims and average over the batch.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::fpack::FeaturePack;
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::numerics::adamw::{adamw_step, AdamWConfig, AdamWState};
use crate::numerics::linear::{Linear, LinearBound};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Checkpoint tag distinguishing model kinds.
pub const CKPT_MODEL_VAE_PAIR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// Match latent means and variances across modalities.
    #[default]
    Geo,
    /// Standard-Gaussian KL prior on both modalities (ablation baseline).
    Kl,
    /// Reconstruction only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Reparameterized draw: z = mu + exp(logvar/2) * eps.
    Sample,
    /// Deterministic: z = mu. Used everywhere at inference.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub lambda_align: f64,
    pub reg_mode: RegMode,
    /// KL weight, used only in `kl` mode.
    pub beta: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 256,
            lambda_align: 0.1,
            reg_mode: RegMode::Geo,
            beta: 0.1,
            iterations: 1000,
            batch: 64,
            lr: 1e-4,
            weight_decay: 0.01,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("latent_dim and hidden must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("alignment batch size must be positive".into()));
        }
        if !(self.lambda_align >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alignment loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("alignment lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Replicate a single feature row along the token axis.
pub fn expand_skeleton(row: &[f64], tokens: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() * tokens);
    for _ in 0..tokens {
        out.extend_from_slice(row);
    }
    out
}

/// Per-item latent distribution parameters, `tokens x latent_dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub tokens: usize,
    pub latent_dim: usize,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

// ── model ──────────────────────────────────────────────────────────────

/// One modality's encoder/decoder. The encoder is input -> hidden -> 2 *
/// latent (split into mu and logvar); the decoder mirrors it back.
#[derive(Debug, Clone)]
pub struct Vae {
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
    pub latent_dim: usize,
}

struct VaeBound {
    enc1: LinearBound,
    enc2: LinearBound,
    dec1: LinearBound,
    dec2: LinearBound,
}

impl Vae {
    pub fn new(rng: &mut Rng, input_dim: usize, hidden: usize, latent_dim: usize) -> Self {
        Self {
            enc1: Linear::init(rng, input_dim, hidden),
            enc2: Linear::init(rng, hidden, 2 * latent_dim),
            dec1: Linear::init(rng, latent_dim, hidden),
            dec2: Linear::init(rng, hidden, input_dim),
            latent_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.enc1.fan_in()
    }

    fn layers(&self) -> [(&'static str, &Linear); 4] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
        ]
    }

    fn bind(&self, tape: &mut Tape) -> Result<VaeBound> {
        Ok(VaeBound {
            enc1: self.enc1.bind(tape)?,
            enc2: self.enc2.bind(tape)?,
            dec1: self.dec1.bind(tape)?,
            dec2: self.dec2.bind(tape)?,
        })
    }

    fn set_requires_grad(&mut self, flag: bool) {
        self.enc1.set_requires_grad(flag);
        self.enc2.set_requires_grad(flag);
        self.dec1.set_requires_grad(flag);
        self.dec2.set_requires_grad(flag);
    }
}

/// Graph for `x -> (mu, logvar, z)`. With `eps` the latent is the
/// reparameterized sample; without it, the mean.
fn encode_graph(
    tape: &mut Tape,
    vae: &Vae,
    b: &VaeBound,
    x: ValueId,
    eps: Option<ValueId>,
) -> Result<(ValueId, ValueId, ValueId)> {
    let h0 = vae.enc1.apply(tape, b.enc1, x)?;
    let h = tape.relu(h0)?;
    let stats = vae.enc2.apply(tape, b.enc2, h)?;
    let l = vae.latent_dim;
    let mu = tape.slice_cols(stats, 0, l)?;
    let raw = tape.slice_cols(stats, l, 2 * l)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
    let z = match eps {
        Some(e) => {
            let half = tape.mul_const(logvar, 0.5)?;
            let sigma = tape.exp(half)?;
            let noise = tape.mul(sigma, e)?;
            tape.add(mu, noise)?
        }
        None => mu,
    };
    Ok((mu, logvar, z))
}

fn decode_graph(tape: &mut Tape, vae: &Vae, b: &VaeBound, z: ValueId) -> Result<ValueId> {
    let h0 = vae.dec1.apply(tape, b.dec1, z)?;
    let h = tape.relu(h0)?;
    vae.dec2.apply(tape, b.dec2, h)
}

/// Encode one item (`tokens x input_dim` row-major). `rng` is consumed only
/// in sample mode.
pub fn encode(
    vae: &Vae,
    x: &[f64],
    tokens: usize,
    mode: EncodeMode,
    rng: Option<&mut Rng>,
) -> Result<(LatentStats, Vec<f64>)> {
    let d = vae.input_dim();
    if tokens == 0 || x.len() != tokens * d {
        return Err(Error::Shape(format!(
            "encode: {} values is not a {tokens} x {d} item",
            x.len()
        )));
    }
    let mut tape = Tape::new();
    let b = vae.bind_const(&mut tape)?;
    let xid = tape.constant(tokens, d, x.to_vec())?;
    let eps = match mode {
        EncodeMode::Sample => {
            let rng = rng.ok_or_else(|| {
                Error::Config("sample-mode encoding needs a random source".into())
            })?;
            let e = rng.normal_vec(tokens * vae.latent_dim);
            Some(tape.constant(tokens, vae.latent_dim, e)?)
        }
        EncodeMode::Mean => None,
    };
    let (mu, logvar, z) = encode_graph(&mut tape, vae, &b, xid, eps)?;
    Ok((
        LatentStats {
            tokens,
            latent_dim: vae.latent_dim,
            mu: tape.value(mu).to_vec(),
            logvar: tape.value(logvar).to_vec(),
        },
        tape.value(z).to_vec(),
    ))
}

/// Decode a latent (`tokens x latent_dim`) back to feature space.
pub fn decode(vae: &Vae, z: &[f64], tokens: usize) -> Result<Vec<f64>> {
    if tokens == 0 || z.len() != tokens * vae.latent_dim {
        return Err(Error::Shape(format!(
            "decode: {} values is not a {tokens} x {} latent",
            z.len(),
            vae.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let b = vae.bind_const(&mut tape)?;
    let zid = tape.constant(tokens, vae.latent_dim, z.to_vec())?;
    let out = decode_graph(&mut tape, vae, &b, zid)?;
    Ok(tape.value(out).to_vec())
}

impl Vae {
    fn bind_const(&self, tape: &mut Tape) -> Result<VaeBound> {
        Ok(VaeBound {
            enc1: self.enc1.bind_const(tape)?,
            enc2: self.enc2.bind_const(tape)?,
            dec1: self.dec1.bind_const(tape)?,
            dec2: self.dec2.bind_const(tape)?,
        })
    }
}

/// Both modality VAEs with a shared latent width.
#[derive(Debug, Clone)]
pub struct VaePair {
    pub skeleton: Vae,
    pub semantic: Vae,
    frozen: bool,
}

impl VaePair {
    pub fn new(rng: &mut Rng, d_s: usize, d_a: usize, cfg: &AlignConfig) -> Result<Self> {
        cfg.validate()?;
        if d_s == 0 || d_a == 0 {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        Ok(Self {
            skeleton: Vae::new(rng, d_s, cfg.hidden, cfg.latent_dim),
            semantic: Vae::new(rng, d_a, cfg.hidden, cfg.latent_dim),
            frozen: false,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.skeleton.latent_dim
    }

    /// Stop all gradient flow; stage-2 training requires this.
    pub fn freeze(&mut self) {
        self.skeleton.set_requires_grad(false);
        self.semantic.set_requires_grad(false);
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameters in canonical (checkpoint/optimizer) order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(16);
        for vae in [&self.skeleton, &self.semantic] {
            for (_, l) in vae.layers() {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(16);
        for vae in [&mut self.skeleton, &mut self.semantic] {
            out.push(&mut vae.enc1.w);
            out.push(&mut vae.enc1.b);
            out.push(&mut vae.enc2.w);
            out.push(&mut vae.enc2.b);
            out.push(&mut vae.dec1.w);
            out.push(&mut vae.dec1.b);
            out.push(&mut vae.dec2.w);
            out.push(&mut vae.dec2.b);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.push_scalar("meta.model", CKPT_MODEL_VAE_PAIR)?;
        c.push_scalar("meta.d_s", self.skeleton.input_dim() as f64)?;
        c.push_scalar("meta.d_a", self.semantic.input_dim() as f64)?;
        c.push_scalar("meta.hidden", self.skeleton.enc1.fan_out() as f64)?;
        c.push_scalar("meta.latent_dim", self.latent_dim() as f64)?;
        for (prefix, vae) in [("skel", &self.skeleton), ("sem", &self.semantic)] {
            for (name, l) in vae.layers() {
                c.push_tensor(&format!("{prefix}.{name}.w"), &l.w)?;
                c.push_tensor(&format!("{prefix}.{name}.b"), &l.b)?;
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.scalar("meta.model")? != CKPT_MODEL_VAE_PAIR {
            return Err(Error::CkptBlockMismatch(
                "checkpoint does not hold an alignment model".into(),
            ));
        }
        let d_s = c.scalar_usize("meta.d_s")?;
        let d_a = c.scalar_usize("meta.d_a")?;
        let hidden = c.scalar_usize("meta.hidden")?;
        let latent = c.scalar_usize("meta.latent_dim")?;
        let load = |prefix: &str, input_dim: usize| -> Result<Vae> {
            let layer = |name: &str, fan_in: usize, fan_out: usize| -> Result<Linear> {
                let w = c.tensor(&format!("{prefix}.{name}.w"))?;
                let b = c.tensor(&format!("{prefix}.{name}.b"))?;
                if w.shape() != [fan_in, fan_out] || b.shape() != [fan_out] {
                    return Err(Error::CkptBlockMismatch(format!(
                        "{prefix}.{name} has shape {:?}/{:?}, expected [{fan_in}, {fan_out}]/[{fan_out}]",
                        w.shape(),
                        b.shape()
                    )));
                }
                Ok(Linear { w: w.with_requires_grad(), b: b.with_requires_grad() })
            };
            Ok(Vae {
                enc1: layer("enc1", input_dim, hidden)?,
                enc2: layer("enc2", hidden, 2 * latent)?,
                dec1: layer("dec1", latent, hidden)?,
                dec2: layer("dec2", hidden, input_dim)?,
                latent_dim: latent,
            })
        };
        Ok(Self { skeleton: load("skel", d_s)?, semantic: load("sem", d_a)?, frozen: false })
    }
}

// ── batches ────────────────────────────────────────────────────────────

/// A flattened batch of paired items: expanded skeleton rows and the
/// matching (attuned) semantic matrices, `(items * tokens) x dim` each.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub items: usize,
    pub tokens: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub xs: Vec<f64>,
    pub xa: Vec<f64>,
}

impl PairBatch {
    pub fn new(
        items: usize,
        tokens: usize,
        d_s: usize,
        d_a: usize,
        xs: Vec<f64>,
        xa: Vec<f64>,
    ) -> Result<Self> {
        if items == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if tokens == 0 || xs.len() != items * tokens * d_s || xa.len() != items * tokens * d_a {
            return Err(Error::Shape(format!(
                "batch of {items} items x {tokens} tokens does not match {} skeleton / {} semantic values",
                xs.len(),
                xa.len()
            )));
        }
        Ok(Self { items, tokens, d_s, d_a, xs, xa })
    }

    /// Assemble a batch from pack items: skeleton rows are expanded to the
    /// semantic token count and paired with their label's semantics.
    pub fn from_packs(
        skeleton: &FeaturePack,
        semantic: &FeaturePack,
        indices: &[usize],
    ) -> Result<Self> {
        if skeleton.tokens != 1 {
            return Err(Error::Shape("skeleton packs carry one token per item".into()));
        }
        let tokens = semantic.tokens as usize;
        let d_s = skeleton.dim as usize;
        let d_a = semantic.dim as usize;
        let mut xs = Vec::with_capacity(indices.len() * tokens * d_s);
        let mut xa = Vec::with_capacity(indices.len() * tokens * d_a);
        for &i in indices {
            let label = skeleton.labels[i] as usize;
            if label >= semantic.n_items() as usize {
                return Err(Error::SplitPackMismatch(format!(
                    "skeleton item {i} has label {label}, semantic pack holds {} classes",
                    semantic.n_items()
                )));
            }
            xs.extend(expand_skeleton(&skeleton.item_f64(i), tokens));
            xa.extend(semantic.item_f64(label));
        }
        Self::new(indices.len(), tokens, d_s, d_a, xs, xa)
    }
}

// ── losses ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignLosses {
    /// Sum of the four per-path reconstruction MSEs.
    pub l_re: f64,
    /// Geometric or KL penalty (0 in `none` mode).
    pub l_reg: f64,
    /// Total: l_re plus the weighted penalty.
    pub l_align: f64,
}

/// Geometric consistency on the tape: squared L2 between latent means plus
/// squared L2 between latent variances, summed over all rows and averaged
/// over the batch.
pub(crate) fn geo_loss_graph(
    tape: &mut Tape,
    mu_s: ValueId,
    logvar_s: ValueId,
    mu_a: ValueId,
    logvar_a: ValueId,
    items: usize,
) -> Result<ValueId> {
    let dmu = tape.sub(mu_s, mu_a)?;
    let ss_mu = tape.sum_sq(dmu)?;
    let var_s = tape.exp(logvar_s)?;
    let var_a = tape.exp(logvar_a)?;
    let dvar = tape.sub(var_s, var_a)?;
    let ss_var = tape.sum_sq(dvar)?;
    let total = tape.add(ss_mu, ss_var)?;
    tape.mul_const(total, 1.0 / items as f64)
}

/// KL(q || N(0, I)) = 0.5 * sum(mu^2 + var - logvar - 1), averaged over the
/// batch.
fn kl_loss_graph(tape: &mut Tape, mu: ValueId, logvar: ValueId, items: usize) -> Result<ValueId> {
    let (rows, cols) = tape.dims(mu);
    let mu_sq = tape.sum_sq(mu)?;
    let var = tape.exp(logvar)?;
    let var_sum = tape.sum_all(var)?;
    let lv_sum = tape.sum_all(logvar)?;
    let a = tape.add(mu_sq, var_sum)?;
    let b = tape.sub(a, lv_sum)?;
    let c = tape.add_const(b, -((rows * cols) as f64))?;
    tape.mul_const(c, 0.5 / items as f64)
}

struct AlignGraph {
    tape: Tape,
    l_re: ValueId,
    l_reg: ValueId,
    l_align: ValueId,
    param_ids: Vec<ValueId>,
}

fn align_graph(
    pair: &VaePair,
    batch: &PairBatch,
    eps: (&[f64], &[f64]),
    reg: RegMode,
    beta: f64,
    lambda_align: f64,
) -> Result<AlignGraph> {
    if batch.d_s != pair.skeleton.input_dim() || batch.d_a != pair.semantic.input_dim() {
        return Err(Error::Shape(format!(
            "batch dims {} / {} do not match model dims {} / {}",
            batch.d_s,
            batch.d_a,
            pair.skeleton.input_dim(),
            pair.semantic.input_dim()
        )));
    }
    let rows = batch.items * batch.tokens;
    let l = pair.latent_dim();
    let (eps_s, eps_a) = eps;

    let mut tape = Tape::new();
    let bs = pair.skeleton.bind(&mut tape)?;
    let ba = pair.semantic.bind(&mut tape)?;
    let param_ids = vec![
        bs.enc1.w, bs.enc1.b, bs.enc2.w, bs.enc2.b, bs.dec1.w, bs.dec1.b, bs.dec2.w, bs.dec2.b,
        ba.enc1.w, ba.enc1.b, ba.enc2.w, ba.enc2.b, ba.dec1.w, ba.dec1.b, ba.dec2.w, ba.dec2.b,
    ];

    let xs = tape.constant(rows, batch.d_s, batch.xs.clone())?;
    let xa = tape.constant(rows, batch.d_a, batch.xa.clone())?;
    let es = tape.constant(rows, l, eps_s.to_vec())?;
    let ea = tape.constant(rows, l, eps_a.to_vec())?;

    let (mu_s, logvar_s, z_s) = encode_graph(&mut tape, &pair.skeleton, &bs, xs, Some(es))?;
    let (mu_a, logvar_a, z_a) = encode_graph(&mut tape, &pair.semantic, &ba, xa, Some(ea))?;

    let rec_ss = decode_graph(&mut tape, &pair.skeleton, &bs, z_s)?;
    let rec_as = decode_graph(&mut tape, &pair.skeleton, &bs, z_a)?;
    let rec_aa = decode_graph(&mut tape, &pair.semantic, &ba, z_a)?;
    let rec_sa = decode_graph(&mut tape, &pair.semantic, &ba, z_s)?;

    let m_ss = tape.mse(rec_ss, xs)?;
    let m_aa = tape.mse(rec_aa, xa)?;
    let m_sa = tape.mse(rec_sa, xa)?;
    let m_as = tape.mse(rec_as, xs)?;
    let intra = tape.add(m_ss, m_aa)?;
    let cross = tape.add(m_sa, m_as)?;
    let l_re = tape.add(intra, cross)?;

    let (l_reg, l_align) = match reg {
        RegMode::Geo => {
            let g = geo_loss_graph(&mut tape, mu_s, logvar_s, mu_a, logvar_a, batch.items)?;
            let weighted = tape.mul_const(g, lambda_align)?;
            (g, tape.add(l_re, weighted)?)
        }
        RegMode::Kl => {
            let ks = kl_loss_graph(&mut tape, mu_s, logvar_s, batch.items)?;
            let ka = kl_loss_graph(&mut tape, mu_a, logvar_a, batch.items)?;
            let k = tape.add(ks, ka)?;
            let weighted = tape.mul_const(k, beta)?;
            (k, tape.add(l_re, weighted)?)
        }
        RegMode::None => {
            let zero = tape.constant(1, 1, vec![0.0])?;
            (zero, l_re)
        }
    };

    Ok(AlignGraph { tape, l_re, l_reg, l_align, param_ids })
}

fn draw_eps(rng: &mut Rng, batch: &PairBatch, latent_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = batch.items * batch.tokens;
    let eps_s = rng.normal_vec(rows * latent_dim);
    let eps_a = rng.normal_vec(rows * latent_dim);
    (eps_s, eps_a)
}

/// Loss values on one batch (reparameterized sampling; draws one eps per
/// modality). Does not touch gradients.
pub fn alignment_losses(
    pair: &VaePair,
    batch: &PairBatch,
    rng: &mut Rng,
    reg: RegMode,
    beta: f64,
    lambda_align: f64,
) -> Result<AlignLosses> {
    let (eps_s, eps_a) = draw_eps(rng, batch, pair.latent_dim());
    let g = align_graph(pair, batch, (&eps_s, &eps_a), reg, beta, lambda_align)?;
    Ok(AlignLosses {
        l_re: g.tape.scalar(g.l_re)?,
        l_reg: g.tape.scalar(g.l_reg)?,
        l_align: g.tape.scalar(g.l_align)?,
    })
}

/// Same as [`alignment_losses`] but also backpropagates, leaving gradients
/// in every parameter tensor's grad slot (in [`VaePair::params`] order).
pub fn alignment_backward(
    pair: &mut VaePair,
    batch: &PairBatch,
    rng: &mut Rng,
    reg: RegMode,
    beta: f64,
    lambda_align: f64,
) -> Result<AlignLosses> {
    if pair.is_frozen() {
        return Err(Error::ModelFrozen("alignment model".into()));
    }
    let (eps_s, eps_a) = draw_eps(rng, batch, pair.latent_dim());
    let mut g = align_graph(pair, batch, (&eps_s, &eps_a), reg, beta, lambda_align)?;
    let losses = AlignLosses {
        l_re: g.tape.scalar(g.l_re)?,
        l_reg: g.tape.scalar(g.l_reg)?,
        l_align: g.tape.scalar(g.l_align)?,
    };
    g.tape.backward(g.l_align)?;
    let ids = g.param_ids.clone();
    g.tape.write_back_grads(&ids, &mut pair.params_mut())?;
    Ok(losses)
}

// ── training ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTraceRow {
    pub iter: usize,
    pub l_re: f64,
    pub l_reg: f64,
    pub l_align: f64,
}

/// Render a trace as plain text, one `iter,L_Re,L_reg,L_Align` row per
/// iteration.
pub fn align_trace_to_text(trace: &[AlignTraceRow]) -> String {
    let mut out = String::from("iter,L_Re,L_reg,L_Align\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.l_re, r.l_reg, r.l_align));
    }
    out
}

pub(crate) fn seen_sample_indices(skeleton: &FeaturePack, split: &SplitSpec) -> Result<Vec<usize>> {
    if let Some(&bad) = skeleton.labels.iter().find(|&&l| l >= split.n_classes()) {
        return Err(Error::SplitPackMismatch(format!(
            "skeleton label {bad} outside the split's {} classes",
            split.n_classes()
        )));
    }
    let indices: Vec<usize> = skeleton
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| split.is_seen(l))
        .map(|(i, _)| i)
        .collect();
    for &c in split.seen() {
        if !skeleton.labels.contains(&c) {
            return Err(Error::SplitPackMismatch(format!(
                "seen class {c} has no skeleton samples"
            )));
        }
    }
    Ok(indices)
}

/// Stage-1 training: minimize the alignment objective on seen-class pairs.
/// Deterministic in (initial parameters, rng seed, inputs).
pub fn train_align(
    pair: &mut VaePair,
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
    split: &SplitSpec,
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<Vec<AlignTraceRow>> {
    cfg.validate()?;
    if pair.is_frozen() {
        return Err(Error::ModelFrozen("alignment model".into()));
    }
    if semantic.n_items() != split.n_classes() {
        return Err(Error::SplitPackMismatch(format!(
            "semantic pack holds {} classes, split declares {}",
            semantic.n_items(),
            split.n_classes()
        )));
    }
    let seen = seen_sample_indices(skeleton, split)?;

    let mut opt = AdamWState::new(
        AdamWConfig::with_lr_wd(cfg.lr, cfg.weight_decay),
        &pair.params(),
    );
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let picks: Vec<usize> = rng.indices(seen.len(), cfg.batch).iter().map(|&i| seen[i]).collect();
        let batch = PairBatch::from_packs(skeleton, semantic, &picks)?;
        let losses =
            alignment_backward(pair, &batch, rng, cfg.reg_mode, cfg.beta, cfg.lambda_align)?;
        let grads: Vec<Tensor> = pair
            .params()
            .iter()
            .map(|p| {
                let g = p.grad().ok_or_else(|| {
                    Error::Numeric("parameter missing a gradient after backward".into())
                })?;
                Tensor::from_vec(p.shape().to_vec(), g.to_vec())
            })
            .collect::<Result<_>>()?;
        adamw_step(&mut opt, &mut pair.params_mut(), &grads)?;
        trace.push(AlignTraceRow {
            iter,
            l_re: losses.l_re,
            l_reg: losses.l_reg,
            l_align: losses.l_align,
        });
    }
    Ok(trace)
}
