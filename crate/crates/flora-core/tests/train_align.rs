//! Closed-loop checks of the first training stage on a tiny two-class
//! synthetic task: the objective falls by half, the geometric penalty it
//! optimizes actually shrinks, zero iterations change nothing, and the
//! whole run is a pure function of its seeds.

use flora_core::align::{
    alignment_losses, expand_skeleton, train_align, AlignConfig, PairBatch, RegMode, VaePair,
};
use flora_core::data::fpack::FeaturePack;
use flora_core::data::split::SplitSpec;
use flora_core::data::synth::{generate_synthetic, SyntheticConfig};
use flora_core::numerics::rng::Rng;

fn toy() -> (FeaturePack, FeaturePack, SplitSpec) {
    generate_synthetic(&SyntheticConfig {
        n_classes: 2,
        n_unseen: 1,
        samples_per_class: 20,
        d_s: 16,
        d_a: 12,
        tokens: 2,
        spread: 0.3,
        coupling: 0.8,
        seed: 7,
    })
    .expect("toy generation")
}

fn toy_cfg() -> AlignConfig {
    AlignConfig {
        latent_dim: 8,
        hidden: 32,
        iterations: 1000,
        batch: 16,
        lr: 1e-3,
        ..AlignConfig::default()
    }
}

fn fresh_pair(cfg: &AlignConfig, d_s: usize, d_a: usize) -> VaePair {
    VaePair::new(&mut Rng::seeded(11), d_s, d_a, cfg).expect("pair")
}

/// All seen-class samples paired with their class semantics, as one batch.
fn seen_eval_batch(
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
    split: &SplitSpec,
) -> PairBatch {
    let tokens = semantic.tokens as usize;
    let mut xs = Vec::new();
    let mut xa = Vec::new();
    let mut items = 0;
    for i in 0..skeleton.n_items() as usize {
        let label = skeleton.labels[i];
        if !split.is_seen(label) {
            continue;
        }
        xs.extend(expand_skeleton(&skeleton.item_f64(i), tokens));
        xa.extend(semantic.item_f64(label as usize));
        items += 1;
    }
    PairBatch::new(items, tokens, skeleton.dim as usize, semantic.dim as usize, xs, xa)
        .expect("eval batch")
}

fn window_mean(trace: &[flora_core::align::AlignTraceRow], range: std::ops::Range<usize>) -> f64 {
    let n = range.len() as f64;
    trace[range].iter().map(|r| r.l_align).sum::<f64>() / n
}

#[test]
fn objective_halves_on_the_two_class_toy() {
    let (skeleton, semantic, split) = toy();
    let cfg = toy_cfg();
    let mut pair = fresh_pair(&cfg, skeleton.dim as usize, semantic.dim as usize);
    let trace = train_align(&mut pair, &skeleton, &semantic, &split, &cfg, &mut Rng::seeded(7))
        .expect("training");
    assert_eq!(trace.len(), cfg.iterations);
    assert!(trace.iter().all(|r| r.l_align.is_finite()));

    // Window-smoothed start and end, so single noisy batches cannot decide.
    let start = window_mean(&trace, 0..25);
    let end = window_mean(&trace, cfg.iterations - 25..cfg.iterations);
    assert!(
        end < 0.5 * start,
        "objective did not halve: windowed start {start:.4}, windowed end {end:.4}"
    );
}

#[test]
fn geometric_penalty_shrinks_during_training() {
    let (skeleton, semantic, split) = toy();
    let cfg = toy_cfg();
    let mut pair = fresh_pair(&cfg, skeleton.dim as usize, semantic.dim as usize);
    let eval = seen_eval_batch(&skeleton, &semantic, &split);
    // Same posterior draws before and after, so only the parameters differ.
    let eps = Rng::seeded(99);

    let before = alignment_losses(
        &pair,
        &eval,
        &mut eps.clone(),
        RegMode::Geo,
        cfg.beta,
        cfg.lambda_align,
    )
    .expect("pre-training eval")
    .l_reg;
    train_align(&mut pair, &skeleton, &semantic, &split, &cfg, &mut Rng::seeded(7))
        .expect("training");
    let after = alignment_losses(
        &pair,
        &eval,
        &mut eps.clone(),
        RegMode::Geo,
        cfg.beta,
        cfg.lambda_align,
    )
    .expect("post-training eval")
    .l_reg;

    assert!(
        after < before,
        "the geometric penalty grew during training: {before:.6} -> {after:.6}"
    );
}

#[test]
fn zero_iterations_changes_nothing() {
    let (skeleton, semantic, split) = toy();
    let cfg = AlignConfig { iterations: 0, ..toy_cfg() };
    let mut pair = fresh_pair(&cfg, skeleton.dim as usize, semantic.dim as usize);
    let before: Vec<Vec<f64>> = pair.params().iter().map(|p| p.data().to_vec()).collect();
    let trace = train_align(&mut pair, &skeleton, &semantic, &split, &cfg, &mut Rng::seeded(7))
        .expect("empty training");
    assert!(trace.is_empty());
    let after: Vec<Vec<f64>> = pair.params().iter().map(|p| p.data().to_vec()).collect();
    assert_eq!(before, after, "parameters moved without any iterations");
}

#[test]
fn same_seeds_reproduce_the_run_exactly() {
    let (skeleton, semantic, split) = toy();
    let cfg = toy_cfg();
    let run = || {
        let mut pair = fresh_pair(&cfg, skeleton.dim as usize, semantic.dim as usize);
        let trace =
            train_align(&mut pair, &skeleton, &semantic, &split, &cfg, &mut Rng::seeded(7))
                .expect("training");
        let params: Vec<Vec<f64>> = pair.params().iter().map(|p| p.data().to_vec()).collect();
        (trace, params)
    };
    let (trace_a, params_a) = run();
    let (trace_b, params_b) = run();
    assert_eq!(trace_a.len(), trace_b.len());
    for (a, b) in trace_a.iter().zip(&trace_b) {
        assert_eq!(a.iter, b.iter);
        assert_eq!(a.l_re.to_bits(), b.l_re.to_bits(), "iteration {}", a.iter);
        assert_eq!(a.l_reg.to_bits(), b.l_reg.to_bits(), "iteration {}", a.iter);
        assert_eq!(a.l_align.to_bits(), b.l_align.to_bits(), "iteration {}", a.iter);
    }
    assert_eq!(params_a, params_b, "replicate runs drifted apart");
}
