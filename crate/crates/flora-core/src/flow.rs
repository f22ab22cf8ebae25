//! Latent transport by flow matching: a small velocity network learns to
//! carry semantic latents (source) to skeleton latents (target) along the
//! straight interpolation path, with a contrastive term that pushes each
//! prediction away from the ground-truth velocities of other classes.
//!
//! The construction is noise-free: sources are encoded means, never
//! Gaussian draws. The only randomness in training is the timestep and the
//! batch selection, which the draw counters make auditable.

use serde::{Deserialize, Serialize};

use crate::align::{encode, expand_skeleton, seen_sample_indices, EncodeMode, VaePair};
use crate::checkpoint::Checkpoint;
use crate::data::fpack::FeaturePack;
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::numerics::adamw::{adamw_step, AdamWConfig, AdamWState};
use crate::numerics::linear::{Linear, LinearBound};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

/// Sinusoidal frequency count; features are all sines then all cosines.
pub const N_FREQ: usize = 64;
/// Frequencies are geometrically spaced over this range.
pub const FREQ_MIN: f64 = 1.0;
pub const FREQ_MAX: f64 = 1000.0;
/// Timestep embedding width.
pub const EMBED_DIM: usize = 64;
/// Layer-norm stabilizer inside the modulated block.
pub const LN_EPS: f64 = 1e-5;
/// Checkpoint tag distinguishing model kinds.
pub const CKPT_MODEL_FLOW: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Layer norm with scale/shift modulation from the timestep embedding.
    #[default]
    ModulatedBlock,
    /// Timestep embedding concatenated to the latent instead.
    PlainMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepSampler {
    /// sigmoid of a standard normal draw.
    #[default]
    LogitNormal,
    Uniform,
}

impl TimestepSampler {
    pub fn draw(self, rng: &mut Rng) -> f64 {
        match self {
            TimestepSampler::LogitNormal => rng.logit_normal_timestep(),
            TimestepSampler::Uniform => rng.uniform_timestep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lambda_flow: f64,
    pub timestep_sampler: TimestepSampler,
    pub backbone: Backbone,
    pub sigma_min: f64,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch: 64,
            lambda_flow: 0.1,
            timestep_sampler: TimestepSampler::LogitNormal,
            backbone: Backbone::ModulatedBlock,
            sigma_min: 1e-5,
            hidden: 256,
            lr: 1e-4,
            weight_decay: 0.01,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("flow batch size must be positive".into()));
        }
        if !(self.lambda_flow >= 0.0) {
            return Err(Error::Config("lambda_flow must be >= 0".into()));
        }
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::Config("sigma_min must be a positive finite value".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("flow hidden width must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("flow lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

// ── path algebra ───────────────────────────────────────────────────────

/// Straight-path point: z_t = z0 + t * (z1 - (1 - sigma_min) * z0), which
/// equals [1 - (1 - sigma_min) t] z0 + t z1 and makes
/// `interpolate = z0 + t * gt_velocity` hold bit-exactly for t in (0, 1).
///
/// The exact endpoints are branched: t = 0 returns z0 verbatim and t = 1
/// returns z1 + sigma_min * z0 computed directly. Evaluating the generic
/// expression at t = 1 runs its intermediate (z1 - (1 - sigma_min) z0)
/// through a scale much larger than the result whenever the signs oppose,
/// and the amplified rounding error lands many ulp away from the endpoint
/// the path is defined to hit.
pub fn interpolate(z0: &[f64], z1: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(Error::Shape(format!(
            "interpolate: {} vs {} entries",
            z0.len(),
            z1.len()
        )));
    }
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(z0.to_vec());
    }
    if t == 1.0 {
        return Ok(z0.iter().zip(z1).map(|(&a, &b)| b + sigma_min * a).collect());
    }
    let keep = 1.0 - sigma_min;
    Ok(z0
        .iter()
        .zip(z1)
        .map(|(&a, &b)| a + t * (b - keep * a))
        .collect())
}

/// Ground-truth velocity of the straight path: v* = z1 - (1 - sigma_min) z0.
pub fn gt_velocity(z0: &[f64], z1: &[f64], sigma_min: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(Error::Shape(format!(
            "gt_velocity: {} vs {} entries",
            z0.len(),
            z1.len()
        )));
    }
    let keep = 1.0 - sigma_min;
    Ok(z0.iter().zip(z1).map(|(&a, &b)| b - keep * a).collect())
}

// ── model ──────────────────────────────────────────────────────────────

/// Velocity network v(z_t, t). Tokens are processed row-wise with shared
/// weights; t enters only through the sinusoidal embedding.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub backbone: Backbone,
    pub latent_dim: usize,
    pub embed1: Linear,
    pub embed2: Linear,
    /// Zero-initialized scale/shift head (modulated backbone only).
    pub modulation: Option<Linear>,
    pub hidden: Linear,
    /// Zero-initialized, so a fresh net is the zero velocity field.
    pub out: Linear,
}

struct FlowBound {
    embed1: LinearBound,
    embed2: LinearBound,
    modulation: Option<LinearBound>,
    hidden: LinearBound,
    out: LinearBound,
}

pub fn frequencies() -> [f64; N_FREQ] {
    let mut f = [0.0; N_FREQ];
    let ratio = FREQ_MAX / FREQ_MIN;
    for (i, slot) in f.iter_mut().enumerate() {
        *slot = FREQ_MIN * ratio.powf(i as f64 / (N_FREQ - 1) as f64);
    }
    f
}

/// Sinusoidal features of one timestep: 64 sines then 64 cosines.
pub fn timestep_features(t: f64) -> Vec<f64> {
    let freqs = frequencies();
    let mut out = Vec::with_capacity(2 * N_FREQ);
    out.extend(freqs.iter().map(|f| (f * t).sin()));
    out.extend(freqs.iter().map(|f| (f * t).cos()));
    out
}

impl FlowNet {
    pub fn new(rng: &mut Rng, latent_dim: usize, hidden: usize, backbone: Backbone) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 {
            return Err(Error::Config("flow net widths must be positive".into()));
        }
        let embed1 = Linear::init(rng, 2 * N_FREQ, EMBED_DIM);
        let embed2 = Linear::init(rng, EMBED_DIM, EMBED_DIM);
        let (modulation, hidden_in) = match backbone {
            Backbone::ModulatedBlock => (Some(Linear::zeroed(EMBED_DIM, 2 * latent_dim)), latent_dim),
            Backbone::PlainMlp => (None, latent_dim + EMBED_DIM),
        };
        Ok(Self {
            backbone,
            latent_dim,
            embed1,
            embed2,
            modulation,
            hidden: Linear::init(rng, hidden_in, hidden),
            out: Linear::zeroed(hidden, latent_dim),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.fan_out()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed1.w, &self.embed1.b, &self.embed2.w, &self.embed2.b];
        if let Some(m) = &self.modulation {
            out.push(&m.w);
            out.push(&m.b);
        }
        out.extend([&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embed1.w,
            &mut self.embed1.b,
            &mut self.embed2.w,
            &mut self.embed2.b,
        ];
        if let Some(m) = &mut self.modulation {
            out.push(&mut m.w);
            out.push(&mut m.b);
        }
        out.extend([
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
        ]);
        out
    }

    fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut out = vec![("embed1", &self.embed1), ("embed2", &self.embed2)];
        if let Some(m) = &self.modulation {
            out.push(("modulation", m));
        }
        out.push(("hidden", &self.hidden));
        out.push(("out", &self.out));
        out
    }

    fn bind(&self, tape: &mut Tape) -> Result<FlowBound> {
        Ok(FlowBound {
            embed1: self.embed1.bind(tape)?,
            embed2: self.embed2.bind(tape)?,
            modulation: self.modulation.as_ref().map(|m| m.bind(tape)).transpose()?,
            hidden: self.hidden.bind(tape)?,
            out: self.out.bind(tape)?,
        })
    }

    fn bind_const(&self, tape: &mut Tape) -> Result<FlowBound> {
        Ok(FlowBound {
            embed1: self.embed1.bind_const(tape)?,
            embed2: self.embed2.bind_const(tape)?,
            modulation: self.modulation.as_ref().map(|m| m.bind_const(tape)).transpose()?,
            hidden: self.hidden.bind_const(tape)?,
            out: self.out.bind_const(tape)?,
        })
    }

    fn bound_param_ids(b: &FlowBound) -> Vec<ValueId> {
        let mut ids = vec![b.embed1.w, b.embed1.b, b.embed2.w, b.embed2.b];
        if let Some(m) = &b.modulation {
            ids.push(m.w);
            ids.push(m.b);
        }
        ids.extend([b.hidden.w, b.hidden.b, b.out.w, b.out.b]);
        ids
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.push_scalar("meta.model", CKPT_MODEL_FLOW)?;
        c.push_scalar("meta.latent_dim", self.latent_dim as f64)?;
        c.push_scalar("meta.hidden", self.hidden_dim() as f64)?;
        let kind = match self.backbone {
            Backbone::ModulatedBlock => 1.0,
            Backbone::PlainMlp => 2.0,
        };
        c.push_scalar("meta.backbone", kind)?;
        for (name, l) in self.layers() {
            c.push_tensor(&format!("flow.{name}.w"), &l.w)?;
            c.push_tensor(&format!("flow.{name}.b"), &l.b)?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.scalar("meta.model")? != CKPT_MODEL_FLOW {
            return Err(Error::CkptBlockMismatch(
                "checkpoint does not hold a velocity model".into(),
            ));
        }
        let latent = c.scalar_usize("meta.latent_dim")?;
        let hidden = c.scalar_usize("meta.hidden")?;
        let tag = c.scalar("meta.backbone")?;
        let backbone = if tag == 1.0 {
            Backbone::ModulatedBlock
        } else if tag == 2.0 {
            Backbone::PlainMlp
        } else {
            return Err(Error::CkptBlockMismatch(format!("unknown backbone tag {tag}")));
        };
        let layer = |name: &str, fan_in: usize, fan_out: usize| -> Result<Linear> {
            let w = c.tensor(&format!("flow.{name}.w"))?;
            let b = c.tensor(&format!("flow.{name}.b"))?;
            if w.shape() != [fan_in, fan_out] || b.shape() != [fan_out] {
                return Err(Error::CkptBlockMismatch(format!(
                    "flow.{name} has shape {:?}/{:?}, expected [{fan_in}, {fan_out}]/[{fan_out}]",
                    w.shape(),
                    b.shape()
                )));
            }
            Ok(Linear { w: w.with_requires_grad(), b: b.with_requires_grad() })
        };
        let (modulation, hidden_in) = match backbone {
            Backbone::ModulatedBlock => {
                (Some(layer("modulation", EMBED_DIM, 2 * latent)?), latent)
            }
            Backbone::PlainMlp => (None, latent + EMBED_DIM),
        };
        Ok(Self {
            backbone,
            latent_dim: latent,
            embed1: layer("embed1", 2 * N_FREQ, EMBED_DIM)?,
            embed2: layer("embed2", EMBED_DIM, EMBED_DIM)?,
            modulation,
            hidden: layer("hidden", hidden_in, hidden)?,
            out: layer("out", hidden, latent)?,
        })
    }
}

/// Velocity graph over a `rows x latent_dim` batch; `tfeat` holds one
/// timestep-feature row per latent row.
fn forward_graph(
    tape: &mut Tape,
    net: &FlowNet,
    b: &FlowBound,
    z_t: ValueId,
    tfeat: ValueId,
) -> Result<ValueId> {
    let e0 = net.embed1.apply(tape, b.embed1, tfeat)?;
    let e1 = tape.silu(e0)?;
    let e = net.embed2.apply(tape, b.embed2, e1)?;
    let h_in = match (net.backbone, &b.modulation) {
        (Backbone::ModulatedBlock, Some(mb)) => {
            let m_in = tape.silu(e)?;
            let ms = net
                .modulation
                .as_ref()
                .expect("modulated backbone carries a modulation head")
                .apply(tape, *mb, m_in)?;
            let scale = tape.slice_cols(ms, 0, net.latent_dim)?;
            let shift = tape.slice_cols(ms, net.latent_dim, 2 * net.latent_dim)?;
            let ln = tape.layer_norm(z_t, LN_EPS)?;
            let gain = tape.add_const(scale, 1.0)?;
            let scaled = tape.mul(ln, gain)?;
            tape.add(scaled, shift)?
        }
        (Backbone::PlainMlp, None) => tape.concat_cols(z_t, e)?,
        _ => return Err(Error::Shape("backbone/modulation head mismatch".into())),
    };
    let h0 = net.hidden.apply(tape, b.hidden, h_in)?;
    let h = tape.silu(h0)?;
    net.out.apply(tape, b.out, h)
}

fn tfeat_rows(t_per_row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_per_row.len() * 2 * N_FREQ);
    for &t in t_per_row {
        out.extend(timestep_features(t));
    }
    out
}

/// Predicted velocity for `rows` latent rows, one timestep per row. Pure
/// and deterministic.
pub fn velocity(net: &FlowNet, z_t: &[f64], rows: usize, t: &[f64]) -> Result<Vec<f64>> {
    if rows == 0 || z_t.len() != rows * net.latent_dim {
        return Err(Error::Shape(format!(
            "velocity: {} values is not {rows} x {} latent rows",
            z_t.len(),
            net.latent_dim
        )));
    }
    if t.len() != rows {
        return Err(Error::Shape(format!(
            "velocity: {} timesteps for {rows} rows",
            t.len()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("timestep".into()));
    }
    let mut tape = Tape::new();
    let b = net.bind_const(&mut tape)?;
    let z = tape.constant(rows, net.latent_dim, z_t.to_vec())?;
    let tf = tape.constant(rows, 2 * N_FREQ, tfeat_rows(t))?;
    let v = forward_graph(&mut tape, net, &b, z, tf)?;
    Ok(tape.value(v).to_vec())
}

/// Velocity plus the vector-Jacobian product w.r.t. the latent input:
/// returns `(v, g)` where `g[i] = d<cotangent, v>/d z_t[i]`. Probing with
/// random cotangents verifies the full input Jacobian.
pub fn velocity_vjp(
    net: &FlowNet,
    z_t: &[f64],
    rows: usize,
    t: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows == 0 || z_t.len() != rows * net.latent_dim || t.len() != rows {
        return Err(Error::Shape(format!(
            "velocity_vjp: {} latent values / {} timesteps is not {rows} rows of width {}",
            z_t.len(),
            t.len(),
            net.latent_dim
        )));
    }
    if cotangent.len() != z_t.len() {
        return Err(Error::Shape(format!(
            "velocity_vjp: cotangent has {} values, expected {}",
            cotangent.len(),
            z_t.len()
        )));
    }
    let mut tape = Tape::new();
    let b = net.bind_const(&mut tape)?;
    let z_host = Tensor::from_vec(vec![rows, net.latent_dim], z_t.to_vec())?.with_requires_grad();
    let z = tape.param(&z_host)?;
    let tf = tape.constant(rows, 2 * N_FREQ, tfeat_rows(t))?;
    let v = forward_graph(&mut tape, net, &b, z, tf)?;
    let value = tape.value(v).to_vec();
    let c = tape.constant(rows, net.latent_dim, cotangent.to_vec())?;
    let prod = tape.mul(v, c)?;
    let s = tape.sum_all(prod)?;
    tape.backward(s)?;
    let grad = tape.grad_tensor(z)?.data().to_vec();
    Ok((value, grad))
}

// ── batches and the contrastive loss ───────────────────────────────────

/// Paired latents for flow training: per item, source `z0` (semantic) and
/// target `z1` (skeleton), both `tokens x latent_dim`, flattened item-major.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub items: usize,
    pub tokens: usize,
    pub latent_dim: usize,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub labels: Vec<u32>,
}

impl FlowBatch {
    pub fn new(
        items: usize,
        tokens: usize,
        latent_dim: usize,
        z0: Vec<f64>,
        z1: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if items == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let want = items * tokens * latent_dim;
        if tokens == 0 || z0.len() != want || z1.len() != want || labels.len() != items {
            return Err(Error::Shape(format!(
                "flow batch of {items} items x {tokens} tokens x {latent_dim} does not match \
                 {} / {} latent values and {} labels",
                z0.len(),
                z1.len(),
                labels.len()
            )));
        }
        Ok(Self { items, tokens, latent_dim, z0, z1, labels })
    }

    fn item<'a>(&self, field: &'a [f64], i: usize) -> &'a [f64] {
        let n = self.tokens * self.latent_dim;
        &field[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowLosses {
    /// Mean over items of the squared positive error.
    pub flow_mse: f64,
    /// Mean over items of the masked squared distance to the neighbor's
    /// ground-truth velocity (before weighting).
    pub contrast: f64,
    /// flow_mse - lambda_flow * contrast.
    pub loss: f64,
}

struct FlowGraph {
    tape: Tape,
    losses: FlowLosses,
    loss_id: ValueId,
    param_ids: Vec<ValueId>,
}

fn conflow_graph(
    net: &FlowNet,
    batch: &FlowBatch,
    t_items: &[f64],
    lambda_flow: f64,
    sigma_min: f64,
) -> Result<FlowGraph> {
    if batch.latent_dim != net.latent_dim {
        return Err(Error::Shape(format!(
            "batch latent width {} vs net {}",
            batch.latent_dim, net.latent_dim
        )));
    }
    if lambda_flow > 0.0 && batch.items < 2 {
        return Err(Error::Config(
            "the contrastive term needs at least 2 items per batch".into(),
        ));
    }
    let per_item = batch.tokens * batch.latent_dim;
    let rows = batch.items * batch.tokens;

    let mut z_t = Vec::with_capacity(rows * batch.latent_dim);
    let mut v_star = Vec::with_capacity(rows * batch.latent_dim);
    let mut t_rows = Vec::with_capacity(rows);
    for (i, &ti) in t_items.iter().enumerate() {
        let z0 = batch.item(&batch.z0, i);
        let z1 = batch.item(&batch.z1, i);
        z_t.extend(interpolate(z0, z1, ti, sigma_min)?);
        v_star.extend(gt_velocity(z0, z1, sigma_min)?);
        t_rows.extend(std::iter::repeat_n(ti, batch.tokens));
    }

    let mut tape = Tape::new();
    let bound = net.bind(&mut tape)?;
    let param_ids = FlowNet::bound_param_ids(&bound);
    let z = tape.constant(rows, batch.latent_dim, z_t)?;
    let tf = tape.constant(rows, 2 * N_FREQ, tfeat_rows(&t_rows))?;
    let v_hat = forward_graph(&mut tape, net, &bound, z, tf)?;

    let vs = tape.constant(rows, batch.latent_dim, v_star.clone())?;
    let d_pos = tape.sub(v_hat, vs)?;
    let ss_pos = tape.sum_sq(d_pos)?;
    let pos = tape.mul_const(ss_pos, 1.0 / batch.items as f64)?;

    let (loss_id, contrast) = if lambda_flow > 0.0 {
        // Negative target: the ground-truth velocity of the next item in
        // the batch, masked out when it shares the anchor's class.
        let mut v_neg = Vec::with_capacity(rows * batch.latent_dim);
        let mut mask = Vec::with_capacity(rows * batch.latent_dim);
        for i in 0..batch.items {
            let j = (i + 1) % batch.items;
            let start = j * per_item;
            v_neg.extend_from_slice(&v_star[start..start + per_item]);
            let m = if batch.labels[j] != batch.labels[i] { 1.0 } else { 0.0 };
            mask.extend(std::iter::repeat_n(m, per_item));
        }
        let vn = tape.constant(rows, batch.latent_dim, v_neg)?;
        let mk = tape.constant(rows, batch.latent_dim, mask)?;
        let d_neg = tape.sub(v_hat, vn)?;
        let masked = tape.mul(d_neg, mk)?;
        let ss_neg = tape.sum_sq(masked)?;
        let neg = tape.mul_const(ss_neg, 1.0 / batch.items as f64)?;
        let weighted = tape.mul_const(neg, lambda_flow)?;
        (tape.sub(pos, weighted)?, tape.scalar(neg)?)
    } else {
        (pos, 0.0)
    };

    let losses = FlowLosses {
        flow_mse: tape.scalar(pos)?,
        contrast,
        loss: tape.scalar(loss_id)?,
    };
    Ok(FlowGraph { tape, losses, loss_id, param_ids })
}

fn draw_timesteps(batch: &FlowBatch, cfg: &FlowTrainConfig, rng: &mut Rng) -> Vec<f64> {
    (0..batch.items).map(|_| cfg.timestep_sampler.draw(rng)).collect()
}

/// Contrastive flow-matching loss on one batch. Draws one timestep per
/// item; never draws Gaussian noise.
pub fn conflow_loss(
    net: &FlowNet,
    batch: &FlowBatch,
    rng: &mut Rng,
    cfg: &FlowTrainConfig,
) -> Result<FlowLosses> {
    cfg.validate()?;
    let t = draw_timesteps(batch, cfg, rng);
    Ok(conflow_graph(net, batch, &t, cfg.lambda_flow, cfg.sigma_min)?.losses)
}

/// Same as [`conflow_loss`] but also backpropagates, leaving gradients in
/// every parameter tensor's grad slot (in [`FlowNet::params`] order).
pub fn conflow_backward(
    net: &mut FlowNet,
    batch: &FlowBatch,
    rng: &mut Rng,
    cfg: &FlowTrainConfig,
) -> Result<FlowLosses> {
    cfg.validate()?;
    let t = draw_timesteps(batch, cfg, rng);
    let mut g = conflow_graph(net, batch, &t, cfg.lambda_flow, cfg.sigma_min)?;
    g.tape.backward(g.loss_id)?;
    let ids = g.param_ids.clone();
    g.tape.write_back_grads(&ids, &mut net.params_mut())?;
    Ok(g.losses)
}

// ── training ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTraceRow {
    pub iter: usize,
    pub loss: f64,
    pub flow_mse: f64,
    pub contrast: f64,
}

/// Render a trace as plain text, one `iter,loss,flow_mse,contrast` row per
/// iteration.
pub fn flow_trace_to_text(trace: &[FlowTraceRow]) -> String {
    let mut out = String::from("iter,loss,flow_mse,contrast\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.flow_mse, r.contrast));
    }
    out
}

/// Mean-mode latents used by flow training and prediction: one source per
/// class (from its semantic matrix) and one target per sample (from its
/// expanded skeleton row).
pub struct LatentSet {
    pub tokens: usize,
    pub latent_dim: usize,
    /// Per class id: `tokens x latent_dim` source latent.
    pub class_sources: Vec<Vec<f64>>,
    /// Per skeleton item: `tokens x latent_dim` target latent.
    pub item_targets: Vec<Vec<f64>>,
}

/// Encode every class's semantics and every skeleton item in mean mode (no
/// randomness involved).
pub fn encode_latents(
    pair: &VaePair,
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
) -> Result<LatentSet> {
    let tokens = semantic.tokens as usize;
    let mut class_sources = Vec::with_capacity(semantic.n_items() as usize);
    for c in 0..semantic.n_items() as usize {
        let (_, z) = encode(&pair.semantic, &semantic.item_f64(c), tokens, EncodeMode::Mean, None)?;
        class_sources.push(z);
    }
    let mut item_targets = Vec::with_capacity(skeleton.n_items() as usize);
    for i in 0..skeleton.n_items() as usize {
        let x = expand_skeleton(&skeleton.item_f64(i), tokens);
        let (_, z) = encode(&pair.skeleton, &x, tokens, EncodeMode::Mean, None)?;
        item_targets.push(z);
    }
    Ok(LatentSet {
        tokens,
        latent_dim: pair.latent_dim(),
        class_sources,
        item_targets,
    })
}

/// Stage-2 training: fit the velocity net on seen-class latent pairs. The
/// alignment pair must be frozen; sources/targets are encoded means, so no
/// Gaussian noise is drawn anywhere in this stage.
pub fn train_flow(
    net: &mut FlowNet,
    pair: &VaePair,
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
    split: &SplitSpec,
    cfg: &FlowTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<FlowTraceRow>> {
    cfg.validate()?;
    if !pair.is_frozen() {
        return Err(Error::VaeNotFrozen);
    }
    if net.latent_dim != pair.latent_dim() {
        return Err(Error::Shape(format!(
            "flow net latent width {} vs alignment latent width {}",
            net.latent_dim,
            pair.latent_dim()
        )));
    }
    if semantic.n_items() != split.n_classes() {
        return Err(Error::SplitPackMismatch(format!(
            "semantic pack holds {} classes, split declares {}",
            semantic.n_items(),
            split.n_classes()
        )));
    }
    let seen = seen_sample_indices(skeleton, split)?;
    let latents = encode_latents(pair, skeleton, semantic)?;

    let mut opt = AdamWState::new(
        AdamWConfig::with_lr_wd(cfg.lr, cfg.weight_decay),
        &net.params(),
    );
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let picks: Vec<usize> =
            rng.indices(seen.len(), cfg.batch).iter().map(|&i| seen[i]).collect();
        let mut z0 = Vec::with_capacity(picks.len() * latents.tokens * latents.latent_dim);
        let mut z1 = Vec::with_capacity(picks.len() * latents.tokens * latents.latent_dim);
        let mut labels = Vec::with_capacity(picks.len());
        for &i in &picks {
            let label = skeleton.labels[i];
            z0.extend_from_slice(&latents.class_sources[label as usize]);
            z1.extend_from_slice(&latents.item_targets[i]);
            labels.push(label);
        }
        let batch = FlowBatch::new(
            picks.len(),
            latents.tokens,
            latents.latent_dim,
            z0,
            z1,
            labels,
        )?;
        let losses = conflow_backward(net, &batch, rng, cfg)?;
        let grads: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| {
                let g = p.grad().ok_or_else(|| {
                    Error::Numeric("parameter missing a gradient after backward".into())
                })?;
                Tensor::from_vec(p.shape().to_vec(), g.to_vec())
            })
            .collect::<Result<_>>()?;
        adamw_step(&mut opt, &mut net.params_mut(), &grads)?;
        trace.push(FlowTraceRow {
            iter,
            loss: losses.loss,
            flow_mse: losses.flow_mse,
            contrast: losses.contrast,
        });
    }
    Ok(trace)
}
