//! Shared helpers for the integration suites: ulp distance and a central
//! finite-difference checker for every gradient the trainers produce.
//!
//! The checker treats each loss as a black box `f(params)`: it asks the
//! backward pass for analytic gradients once, then probes the loss with
//! symmetric perturbations per coordinate. Stochastic draws (posterior
//! noise, timesteps) are pinned by cloning one base generator before every
//! evaluation, so the loss is a deterministic function of the parameters
//! while probing.
#![allow(dead_code)]

use flora_core::align::{
    alignment_backward, alignment_losses, AlignConfig, PairBatch, RegMode, VaePair,
};
use flora_core::flow::{
    conflow_backward, conflow_loss, velocity, velocity_vjp, Backbone, FlowBatch, FlowNet,
    FlowTrainConfig,
};
use flora_core::numerics::rng::Rng;

/// Central-difference step. Losses here are O(1)-O(10), so truncation
/// (~h^2) and cancellation (~eps/h) both sit far below the relative budget.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error budget for analytic-vs-numeric agreement.
pub const GRAD_TOL: f64 = 1e-4;
/// Below this magnitude the comparison switches to absolute terms, since
/// finite differences cannot resolve gradients smaller than their own noise.
pub const GRAD_FLOOR: f64 = 1e-5;

// ── float comparison ─────────────────────────────────────────────────

/// Map a float's bit pattern to an integer scale where adjacent
/// representable values differ by exactly 1 (sign-magnitude to two's
/// complement trick).
fn monotone_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Number of representable doubles between `a` and `b`; 0 when equal
/// (including -0 vs +0), `u64::MAX` when either is NaN or infinite.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if !a.is_finite() || !b.is_finite() {
        return u64::MAX;
    }
    monotone_bits(a).abs_diff(monotone_bits(b))
}

/// Relative gap between an analytic value and a finite-difference estimate,
/// floored so near-zero pairs compare on absolute terms.
pub fn rel_gap(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

// ── gradient checking ────────────────────────────────────────────────

/// Running tally over every coordinate comparison.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradStats {
    pub checks: usize,
    pub max_rel: f64,
}

impl GradStats {
    fn absorb(&mut self, rel: f64) {
        self.checks += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
        }
    }
}

fn perturb_pair(pair: &mut VaePair, pi: usize, j: usize, dx: f64) {
    let mut ps = pair.params_mut();
    ps[pi].data_mut()[j] += dx;
}

fn perturb_net(net: &mut FlowNet, pi: usize, j: usize, dx: f64) {
    let mut ps = net.params_mut();
    ps[pi].data_mut()[j] += dx;
}

/// One random alignment instance: random dims, weights, batch, and loss
/// weights; checks every parameter coordinate of both encoders/decoders.
pub fn check_align_grads(seed: u64, reg: RegMode, stats: &mut GradStats) {
    let mut rng = Rng::seeded(seed);
    let d_s = 3 + rng.index_below(3);
    let d_a = 3 + rng.index_below(3);
    let hidden = 4 + rng.index_below(3);
    let latent = 2 + rng.index_below(2);
    let items = 2 + rng.index_below(2);
    let tokens = 1 + rng.index_below(2);
    let cfg = AlignConfig { latent_dim: latent, hidden, ..AlignConfig::default() };
    let mut pair = VaePair::new(&mut rng, d_s, d_a, &cfg).expect("well-formed pair");
    let batch = PairBatch::new(
        items,
        tokens,
        d_s,
        d_a,
        rng.normal_vec(items * tokens * d_s),
        rng.normal_vec(items * tokens * d_a),
    )
    .expect("well-formed batch");
    let beta = 0.3 + rng.uniform01();
    let lambda = 0.3 + rng.uniform01();
    // Pinned source for the posterior draws: cloned before every evaluation.
    let eps_rng = Rng::seeded(seed ^ 0x5851_f42d_4c95_7f2d);

    let losses = alignment_backward(&mut pair, &batch, &mut eps_rng.clone(), reg, beta, lambda)
        .expect("backward");
    assert!(losses.l_align.is_finite(), "non-finite alignment loss at seed {seed}");
    let grads: Vec<Vec<f64>> = pair
        .params()
        .iter()
        .map(|p| p.grad().expect("backward writes every gradient").to_vec())
        .collect();

    for (pi, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            perturb_pair(&mut pair, pi, j, FD_STEP);
            let up = alignment_losses(&pair, &batch, &mut eps_rng.clone(), reg, beta, lambda)
                .expect("loss at +h")
                .l_align;
            perturb_pair(&mut pair, pi, j, -2.0 * FD_STEP);
            let down = alignment_losses(&pair, &batch, &mut eps_rng.clone(), reg, beta, lambda)
                .expect("loss at -h")
                .l_align;
            perturb_pair(&mut pair, pi, j, FD_STEP);
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = rel_gap(analytic, fd);
            assert!(
                rel <= GRAD_TOL,
                "alignment ({reg:?}) gradient mismatch at seed {seed}, param {pi}, coord {j}: \
                 analytic {analytic:.6e} vs central difference {fd:.6e} (rel {rel:.3e})"
            );
            stats.absorb(rel);
        }
    }
}

/// One random transport-loss instance. Small tensors are checked
/// exhaustively; the two big timestep-embedding matrices are probed at 24
/// seeded random coordinates each (different coordinates per instance).
pub fn check_conflow_grads(seed: u64, lambda_flow: f64, stats: &mut GradStats) {
    let mut rng = Rng::seeded(seed);
    let latent = 2 + rng.index_below(3);
    let hidden = 6 + rng.index_below(4);
    let items = 3 + rng.index_below(2);
    let tokens = 1 + rng.index_below(2);
    let backbone =
        if seed.is_multiple_of(2) { Backbone::ModulatedBlock } else { Backbone::PlainMlp };
    let mut net = FlowNet::new(&mut rng, latent, hidden, backbone).expect("well-formed net");
    // The output and modulation heads start at zero; nudge every weight so
    // the instance exercises all gradient paths instead of a dead field.
    {
        let mut ps = net.params_mut();
        for p in ps.iter_mut() {
            for v in p.data_mut() {
                *v += 0.05 * rng.standard_normal();
            }
        }
    }
    let per = items * tokens * latent;
    let z0 = rng.normal_vec(per);
    let z1 = rng.normal_vec(per);
    // Adjacent same-class pair so the neighbor mask exercises both branches.
    let mut labels: Vec<u32> = (0..items as u32).map(|i| i % 3).collect();
    labels[1] = labels[0];
    let batch = FlowBatch::new(items, tokens, latent, z0, z1, labels).expect("batch");
    let cfg = FlowTrainConfig { lambda_flow, hidden, backbone, ..FlowTrainConfig::default() };
    let t_rng = Rng::seeded(seed ^ 0xda94_2042_e4dd_58b5);

    let losses =
        conflow_backward(&mut net, &batch, &mut t_rng.clone(), &cfg).expect("backward");
    assert!(losses.loss.is_finite(), "non-finite transport loss at seed {seed}");
    let grads: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad().expect("backward writes every gradient").to_vec())
        .collect();

    let mut pick = Rng::seeded(seed ^ 0x94d0_49bb_1331_11eb);
    for (pi, g) in grads.iter().enumerate() {
        let coords: Vec<usize> = if g.len() <= 128 {
            (0..g.len()).collect()
        } else {
            (0..24).map(|_| pick.index_below(g.len())).collect()
        };
        for &j in &coords {
            let analytic = g[j];
            perturb_net(&mut net, pi, j, FD_STEP);
            let up = conflow_loss(&net, &batch, &mut t_rng.clone(), &cfg)
                .expect("loss at +h")
                .loss;
            perturb_net(&mut net, pi, j, -2.0 * FD_STEP);
            let down = conflow_loss(&net, &batch, &mut t_rng.clone(), &cfg)
                .expect("loss at -h")
                .loss;
            perturb_net(&mut net, pi, j, FD_STEP);
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = rel_gap(analytic, fd);
            assert!(
                rel <= GRAD_TOL,
                "transport loss (lambda {lambda_flow}) gradient mismatch at seed {seed}, \
                 param {pi}, coord {j}: analytic {analytic:.6e} vs central difference \
                 {fd:.6e} (rel {rel:.3e})"
            );
            stats.absorb(rel);
        }
    }
}

/// One random velocity-field instance: the reverse-mode vector-Jacobian
/// product with respect to the query points must match central differences
/// of a cotangent-weighted sum, and its forward value must agree with the
/// plain forward pass.
pub fn check_velocity_vjp_grads(seed: u64, stats: &mut GradStats) {
    let mut rng = Rng::seeded(seed);
    let latent = 2 + rng.index_below(3);
    let rows = 2 + rng.index_below(3);
    let backbone =
        if seed.is_multiple_of(2) { Backbone::ModulatedBlock } else { Backbone::PlainMlp };
    let mut net = FlowNet::new(&mut rng, latent, 6, backbone).expect("well-formed net");
    {
        let mut ps = net.params_mut();
        for p in ps.iter_mut() {
            for v in p.data_mut() {
                *v += 0.05 * rng.standard_normal();
            }
        }
    }
    let z: Vec<f64> = rng.normal_vec(rows * latent);
    let t: Vec<f64> = (0..rows).map(|_| rng.uniform01()).collect();
    let cot: Vec<f64> = rng.normal_vec(rows * latent);

    let (value, grad) = velocity_vjp(&net, &z, rows, &t, &cot).expect("vjp");
    let direct = velocity(&net, &z, rows, &t).expect("forward");
    for (i, (a, b)) in value.iter().zip(&direct).enumerate() {
        assert!(
            ulp_distance(*a, *b) <= 2,
            "vjp forward drifted from the plain forward at seed {seed}, coord {i}: {a} vs {b}"
        );
    }

    let weighted = |v: &[f64]| -> f64 { v.iter().zip(&cot).map(|(x, c)| x * c).sum() };
    for j in 0..z.len() {
        let mut zp = z.clone();
        zp[j] += FD_STEP;
        let mut zm = z.clone();
        zm[j] -= FD_STEP;
        let up = weighted(&velocity(&net, &zp, rows, &t).expect("forward at +h"));
        let down = weighted(&velocity(&net, &zm, rows, &t).expect("forward at -h"));
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = rel_gap(grad[j], fd);
        assert!(
            rel <= GRAD_TOL,
            "velocity input-jacobian mismatch at seed {seed}, coord {j}: \
             analytic {:.6e} vs central difference {fd:.6e} (rel {rel:.3e})",
            grad[j]
        );
        stats.absorb(rel);
    }
}

/// The full 100-instance budget: every loss mode, both backbones, both
/// contrastive settings, and the velocity field's input Jacobian.
pub fn run_gradient_suite() -> (usize, GradStats) {
    let mut stats = GradStats::default();
    let mut instances = 0;
    for i in 0..25 {
        check_align_grads(1000 + i, RegMode::Geo, &mut stats);
        instances += 1;
    }
    for i in 0..25 {
        check_align_grads(2000 + i, RegMode::Kl, &mut stats);
        instances += 1;
    }
    for i in 0..10 {
        check_align_grads(3000 + i, RegMode::None, &mut stats);
        instances += 1;
    }
    for i in 0..20 {
        check_conflow_grads(4000 + i, 0.1 + 0.02 * i as f64, &mut stats);
        instances += 1;
    }
    for i in 0..10 {
        check_conflow_grads(5000 + i, 0.0, &mut stats);
        instances += 1;
    }
    for i in 0..10 {
        check_velocity_vjp_grads(6000 + i, &mut stats);
        instances += 1;
    }
    (instances, stats)
}
