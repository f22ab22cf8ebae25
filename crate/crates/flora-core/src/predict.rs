//! Classification by velocity error: a test skeleton's latent is scored
//! against each candidate class by interpolating from that class's semantic
//! latent toward the skeleton latent, asking the velocity net for one step,
//! and measuring how far the prediction falls from the ground-truth
//! velocity of that pairing. The right class makes the transport easy, so
//! the smallest error wins.
//!
//! The generalized protocol adds a seen/unseen gate: whichever domain the
//! error ratio rules out is pushed away with a large additive penalty.
//! Two baseline classifiers (pooled-cosine matching and a softmax linear
//! probe on synthesized features) are included for comparison runs.

use serde::{Deserialize, Serialize};

use crate::align::{decode, encode, EncodeMode, VaePair};
use crate::attune::pool_tokens;
use crate::data::fpack::FeaturePack;
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::flow::{gt_velocity, interpolate, velocity, FlowNet};
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Inference timestep.
    pub t: f64,
    /// Optional multi-timestep averaging; empty means single-t.
    pub t_multi: Vec<f64>,
    /// Domain-gate threshold on the seen/unseen error ratio.
    pub gamma: f64,
    /// Additive penalty pushing a class out of contention.
    pub alpha: f64,
    /// Synthesized samples per class for the linear baseline.
    pub n_synth: u32,
    /// Path parameter shared with the flow stage.
    pub sigma_min: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            t: 0.1,
            t_multi: Vec::new(),
            gamma: 0.75,
            alpha: 1e9,
            n_synth: 50,
            sigma_min: 1e-5,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        let t_ok = |t: f64| t.is_finite() && (0.0..1.0).contains(&t);
        if !t_ok(self.t) || !self.t_multi.iter().copied().all(t_ok) {
            return Err(Error::Config("inference timesteps must lie in [0, 1)".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        if !(self.alpha > 1e6) {
            return Err(Error::Config(
                "alpha must exceed 1e6 so it dominates any plausible error".into(),
            ));
        }
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::Config("sigma_min must be a positive finite value".into()));
        }
        Ok(())
    }

    fn timesteps(&self) -> Vec<f64> {
        if self.t_multi.is_empty() {
            vec![self.t]
        } else {
            self.t_multi.clone()
        }
    }
}

/// A candidate class and its mean-mode semantic latent
/// (`tokens x latent_dim`, flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLatent {
    pub class: u32,
    pub z: Vec<f64>,
}

// ── velocity errors ────────────────────────────────────────────────────

/// Error of transporting candidate semantics `z_a` toward the skeleton
/// latent `z_s` at time `t`: the L2 norm (over all token x dim entries) of
/// predicted minus ground-truth velocity.
pub fn velocity_error(
    net: &FlowNet,
    z_s: &[f64],
    z_a: &[f64],
    tokens: usize,
    t: f64,
    sigma_min: f64,
) -> Result<f64> {
    let cand = [ClassLatent { class: 0, z: z_a.to_vec() }];
    Ok(velocity_errors(net, z_s, &cand, tokens, &[t], sigma_min)?[0])
}

/// Batched velocity errors for many candidates, averaged over `ts`. One
/// network pass per timestep covers all candidates.
pub fn velocity_errors(
    net: &FlowNet,
    z_s: &[f64],
    candidates: &[ClassLatent],
    tokens: usize,
    ts: &[f64],
    sigma_min: f64,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Evaluation("empty candidate set".into()));
    }
    if ts.is_empty() {
        return Err(Error::Config("at least one inference timestep is required".into()));
    }
    let per_item = tokens * net.latent_dim;
    if tokens == 0 || z_s.len() != per_item {
        return Err(Error::Shape(format!(
            "skeleton latent of {} values is not {tokens} x {}",
            z_s.len(),
            net.latent_dim
        )));
    }
    for c in candidates {
        if c.z.len() != per_item {
            return Err(Error::Shape(format!(
                "candidate {} latent has {} values, expected {per_item}",
                c.class,
                c.z.len()
            )));
        }
    }

    let rows = candidates.len() * tokens;
    let mut acc = vec![0.0; candidates.len()];
    for &t in ts {
        let mut z_t = Vec::with_capacity(rows * net.latent_dim);
        let mut v_star = Vec::with_capacity(rows * net.latent_dim);
        for c in candidates {
            z_t.extend(interpolate(&c.z, z_s, t, sigma_min)?);
            v_star.extend(gt_velocity(&c.z, z_s, sigma_min)?);
        }
        let t_rows = vec![t; rows];
        let v_hat = velocity(net, &z_t, rows, &t_rows)?;
        for (i, e) in acc.iter_mut().enumerate() {
            let start = i * per_item;
            let end = start + per_item;
            let ss: f64 = v_hat[start..end]
                .iter()
                .zip(&v_star[start..end])
                .map(|(&p, &g)| (p - g) * (p - g))
                .sum();
            let err = ss.sqrt();
            if !err.is_finite() {
                return Err(Error::NonFinite(format!(
                    "velocity error of candidate {}",
                    candidates[i].class
                )));
            }
            *e += err;
        }
    }
    let n = ts.len() as f64;
    Ok(acc.into_iter().map(|e| e / n).collect())
}

fn argmin_class(pairs: &[(u32, f64)]) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for &(c, e) in pairs {
        let better = match best {
            None => true,
            Some((be, bc)) => e < be || (e == be && c < bc),
        };
        if better {
            best = Some((e, c));
        }
    }
    best.map(|(_, c)| c)
}

// ── prediction ─────────────────────────────────────────────────────────

/// Zero-shot prediction: the candidate class with the smallest velocity
/// error; ties break toward the lower class id.
pub fn zsl_predict(
    net: &FlowNet,
    z_s: &[f64],
    candidates: &[ClassLatent],
    tokens: usize,
    cfg: &PredictConfig,
) -> Result<u32> {
    cfg.validate()?;
    let errs = velocity_errors(net, z_s, candidates, tokens, &cfg.timesteps(), cfg.sigma_min)?;
    let pairs: Vec<(u32, f64)> =
        candidates.iter().map(|c| c.class).zip(errs).collect();
    argmin_class(&pairs).ok_or_else(|| Error::Evaluation("empty candidate set".into()))
}

/// Generalized prediction over both domains. The seen/unseen error ratio
/// decides which domain the additive penalty lands on; if both domain
/// minima are exactly zero the ratio is defined as 1.
pub fn gzsl_predict(
    net: &FlowNet,
    z_s: &[f64],
    seen: &[ClassLatent],
    unseen: &[ClassLatent],
    tokens: usize,
    cfg: &PredictConfig,
) -> Result<u32> {
    cfg.validate()?;
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::Evaluation("both candidate domains must be nonempty".into()));
    }
    let ts = cfg.timesteps();
    let e_seen = velocity_errors(net, z_s, seen, tokens, &ts, cfg.sigma_min)?;
    let e_unseen = velocity_errors(net, z_s, unseen, tokens, &ts, cfg.sigma_min)?;
    let delta_s = e_seen.iter().copied().fold(f64::INFINITY, f64::min);
    let delta_u = e_unseen.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = if delta_s == 0.0 && delta_u == 0.0 { 1.0 } else { delta_s / delta_u };
    let gate = ratio <= cfg.gamma;

    let mut pairs = Vec::with_capacity(seen.len() + unseen.len());
    for (c, e) in seen.iter().map(|c| c.class).zip(&e_seen) {
        // XOR: in-domain-seen with the gate closed (or open for unseen
        // membership) attracts the penalty.
        let penalized = true ^ gate;
        pairs.push((c, e + if penalized { cfg.alpha } else { 0.0 }));
    }
    for (c, e) in unseen.iter().map(|c| c.class).zip(&e_unseen) {
        let penalized = false ^ gate;
        pairs.push((c, e + if penalized { cfg.alpha } else { 0.0 }));
    }
    argmin_class(&pairs).ok_or_else(|| Error::Evaluation("empty candidate set".into()))
}

// ── evaluation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Zsl,
    Gzsl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub class: u32,
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub actual: u32,
    pub predicted: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub config_echo: String,
    /// Overall top-1 accuracy (zero-shot protocol).
    pub acc: Option<f64>,
    /// Seen-item accuracy (generalized protocol).
    pub s: Option<f64>,
    /// Unseen-item accuracy (generalized protocol).
    pub u: Option<f64>,
    /// Harmonic mean 2SU/(S+U).
    pub h: Option<f64>,
    pub per_class: Vec<PerClass>,
    pub confusion: Vec<ConfusionCell>,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Score aligned predictions against labels under the given protocol.
pub fn evaluate(
    predictions: &[u32],
    labels: &[u32],
    split: &SplitSpec,
    protocol: Protocol,
    config_echo: String,
    seed: u64,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("no items to evaluate".into()));
    }
    for &l in labels {
        if l >= split.n_classes() {
            return Err(Error::Evaluation(format!(
                "label {l} outside the split's {} classes",
                split.n_classes()
            )));
        }
        if protocol == Protocol::Zsl && split.is_seen(l) {
            return Err(Error::Evaluation(format!(
                "seen label {l} in a zero-shot evaluation"
            )));
        }
    }

    let mut per: std::collections::BTreeMap<u32, (u64, u64)> = std::collections::BTreeMap::new();
    let mut confusion: std::collections::BTreeMap<(u32, u32), u64> =
        std::collections::BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        let e = per.entry(l).or_insert((0, 0));
        e.0 += 1;
        if p == l {
            e.1 += 1;
        }
        *confusion.entry((l, p)).or_insert(0) += 1;
    }
    let per_class: Vec<PerClass> = per
        .iter()
        .map(|(&class, &(total, correct))| PerClass {
            class,
            total,
            correct,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    let confusion: Vec<ConfusionCell> = confusion
        .into_iter()
        .map(|((actual, predicted), count)| ConfusionCell { actual, predicted, count })
        .collect();

    let micro = |want_seen: Option<bool>| -> (u64, u64) {
        let mut total = 0;
        let mut correct = 0;
        for (&p, &l) in predictions.iter().zip(labels) {
            if let Some(ws) = want_seen {
                if split.is_seen(l) != ws {
                    continue;
                }
            }
            total += 1;
            if p == l {
                correct += 1;
            }
        }
        (total, correct)
    };

    let report = match protocol {
        Protocol::Zsl => {
            let (total, correct) = micro(None);
            EvalReport {
                protocol,
                seed,
                config_echo,
                acc: Some(correct as f64 / total as f64),
                s: None,
                u: None,
                h: None,
                per_class,
                confusion,
            }
        }
        Protocol::Gzsl => {
            let (ts, cs) = micro(Some(true));
            let (tu, cu) = micro(Some(false));
            if ts == 0 || tu == 0 {
                return Err(Error::Evaluation(
                    "generalized evaluation needs items from both domains".into(),
                ));
            }
            let s = cs as f64 / ts as f64;
            let u = cu as f64 / tu as f64;
            EvalReport {
                protocol,
                seed,
                config_echo,
                acc: None,
                s: Some(s),
                u: Some(u),
                h: Some(harmonic_mean(s, u)),
                per_class,
                confusion,
            }
        }
    };
    Ok(report)
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", 100.0 * x),
        None => "-".into(),
    }
}

impl EvalReport {
    /// Structured serialization with stable key order (declaration order).
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Evaluation(format!("report serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// Four-column summary, percentages at one decimal place.
    pub fn text_table(&self) -> String {
        format!(
            "Acc    S      U      H\n{:<6} {:<6} {:<6} {:<6}\n",
            pct(self.acc),
            pct(self.s),
            pct(self.u),
            pct(self.h)
        )
    }
}

// ── baselines ──────────────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Nearest-candidate matching on token-mean-pooled latents by cosine
/// similarity; ties break toward the lower class id.
pub fn baseline_similarity(
    z_s: &[f64],
    candidates: &[ClassLatent],
    tokens: usize,
    latent_dim: usize,
) -> Result<u32> {
    if candidates.is_empty() {
        return Err(Error::Evaluation("empty candidate set".into()));
    }
    let pooled_s = pool_tokens(z_s, tokens, latent_dim)?;
    let mut pairs = Vec::with_capacity(candidates.len());
    for c in candidates {
        let pooled_c = pool_tokens(&c.z, tokens, latent_dim)?;
        // argmax of similarity == argmin of its negation.
        pairs.push((c.class, -cosine(&pooled_s, &pooled_c)?));
    }
    argmin_class(&pairs).ok_or_else(|| Error::Evaluation("empty candidate set".into()))
}

/// Linear softmax probe over a fixed class list.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: Vec<u32>,
    pub dim: usize,
    /// `dim x classes`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature row of {} values, classifier expects {}",
                x.len(),
                self.dim
            )));
        }
        let k = self.classes.len();
        let mut out = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(&self.w[i * k..(i + 1) * k]) {
                *o += xi * wij;
            }
        }
        Ok(out)
    }

    pub fn classify(&self, x: &[f64]) -> Result<u32> {
        let scores = self.scores(x)?;
        let pairs: Vec<(u32, f64)> =
            self.classes.iter().copied().zip(scores.iter().map(|&s| -s)).collect();
        argmin_class(&pairs).ok_or_else(|| Error::Evaluation("classifier has no classes".into()))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Full-batch gradient descent on the softmax cross-entropy of a linear
/// map. Deterministic (zero init, fixed schedule).
pub fn train_linear_classifier(
    features: &[f64],
    n: usize,
    dim: usize,
    labels: &[u32],
    classes: &[u32],
    iterations: usize,
    lr: f64,
) -> Result<LinearClassifier> {
    if n == 0 || classes.is_empty() {
        return Err(Error::Config("classifier training needs items and classes".into()));
    }
    if features.len() != n * dim || labels.len() != n {
        return Err(Error::Shape(format!(
            "{} feature values / {} labels do not form {n} rows of width {dim}",
            features.len(),
            labels.len()
        )));
    }
    let k = classes.len();
    let class_index = |c: u32| -> Result<usize> {
        classes
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::Evaluation(format!("label {c} not in the class list")))
    };
    let targets: Vec<usize> = labels.iter().map(|&l| class_index(l)).collect::<Result<_>>()?;

    let mut clf = LinearClassifier {
        classes: classes.to_vec(),
        dim,
        w: vec![0.0; dim * k],
        b: vec![0.0; k],
    };
    let mut probs = vec![0.0; k];
    let mut gw = vec![0.0; dim * k];
    let mut gb = vec![0.0; k];
    for _ in 0..iterations {
        gw.fill(0.0);
        gb.fill(0.0);
        for (i, &target) in targets.iter().enumerate() {
            let x = &features[i * dim..(i + 1) * dim];
            probs.copy_from_slice(&clf.scores(x)?);
            softmax_in_place(&mut probs);
            probs[target] -= 1.0;
            for (j, &xj) in x.iter().enumerate() {
                for (g, &p) in gw[j * k..(j + 1) * k].iter_mut().zip(&probs) {
                    *g += xj * p;
                }
            }
            for (g, &p) in gb.iter_mut().zip(&probs) {
                *g += p;
            }
        }
        let scale = lr / n as f64;
        for (w, g) in clf.w.iter_mut().zip(&gw) {
            *w -= scale * g;
        }
        for (b, g) in clf.b.iter_mut().zip(&gb) {
            *b -= scale * g;
        }
    }
    Ok(clf)
}

const BASELINE_ITERS: usize = 500;
const BASELINE_LR: f64 = 0.5;

/// Feature-synthesis baseline: draw `n_synth` sampled semantic latents per
/// unseen class, decode them through the skeleton decoder, pool tokens, and
/// fit a softmax linear probe on the synthesized features.
pub fn baseline_linear(
    pair: &VaePair,
    semantic: &FeaturePack,
    split: &SplitSpec,
    rng: &mut Rng,
    cfg: &PredictConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    if !pair.is_frozen() {
        return Err(Error::VaeNotFrozen);
    }
    if cfg.n_synth == 0 {
        return Err(Error::Config("n_synth must be positive".into()));
    }
    if semantic.n_items() != split.n_classes() {
        return Err(Error::SplitPackMismatch(format!(
            "semantic pack holds {} classes, split declares {}",
            semantic.n_items(),
            split.n_classes()
        )));
    }
    let tokens = semantic.tokens as usize;
    let d_s = pair.skeleton.input_dim();
    let classes: Vec<u32> = split.unseen().to_vec();
    let n = classes.len() * cfg.n_synth as usize;
    let mut features = Vec::with_capacity(n * d_s);
    let mut labels = Vec::with_capacity(n);
    for &c in &classes {
        let x = semantic.item_f64(c as usize);
        for _ in 0..cfg.n_synth {
            let (_, z) = encode(&pair.semantic, &x, tokens, EncodeMode::Sample, Some(rng))?;
            let synth = decode(&pair.skeleton, &z, tokens)?;
            features.extend(pool_tokens(&synth, tokens, d_s)?);
            labels.push(c);
        }
    }
    train_linear_classifier(&features, n, d_s, &labels, &classes, BASELINE_ITERS, BASELINE_LR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use crate::flow::Backbone;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;

    const SM: f64 = 1e-5;

    fn zero_net(latent: usize) -> FlowNet {
        let mut rng = Rng::seeded(1);
        FlowNet::new(&mut rng, latent, 8, Backbone::ModulatedBlock).unwrap()
    }

    fn cands(zs: &[(u32, f64)]) -> Vec<ClassLatent> {
        zs.iter().map(|&(class, z)| ClassLatent { class, z: vec![z] }).collect()
    }

    #[test]
    fn zero_field_errors_match_hand_values() {
        // With a zero velocity field the error is just the ground-truth
        // velocity norm: |z_s - (1 - sigma_min) z_a|.
        let net = zero_net(1);
        let e1 = velocity_error(&net, &[1.0], &[0.5], 1, 0.1, SM).unwrap();
        let e2 = velocity_error(&net, &[1.0], &[2.0], 1, 0.1, SM).unwrap();
        assert!((e1 - 0.500005).abs() < 1e-12, "{e1}");
        assert!((e2 - 0.99998).abs() < 1e-12, "{e2}");
    }

    #[test]
    fn exact_candidate_has_zero_error() {
        // z_s chosen so the ground-truth velocity vanishes exactly.
        let net = zero_net(1);
        let e = velocity_error(&net, &[0.99999], &[1.0], 1, 0.1, SM).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn zsl_picks_smaller_error_and_breaks_ties_low() {
        let net = zero_net(1);
        let cfg = PredictConfig::default();
        let pick = zsl_predict(&net, &[1.0], &cands(&[(7, 0.5), (9, 2.0)]), 1, &cfg).unwrap();
        assert_eq!(pick, 7);
        let pick = zsl_predict(&net, &[1.0], &cands(&[(9, 0.5), (7, 2.0)]), 1, &cfg).unwrap();
        assert_eq!(pick, 9);
        // Duplicated latents tie; the lower id wins regardless of order.
        let tie = zsl_predict(&net, &[1.0], &cands(&[(5, 0.5), (3, 0.5)]), 1, &cfg).unwrap();
        assert_eq!(tie, 3);
        let single = zsl_predict(&net, &[1.0], &cands(&[(4, 2.0)]), 1, &cfg).unwrap();
        assert_eq!(single, 4);
        assert!(matches!(
            zsl_predict(&net, &[1.0], &[], 1, &cfg),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn multi_timestep_errors_average() {
        // Plain backbone: the timestep embedding is concatenated straight into
        // the trunk, so a nonzero output head sees different inputs at
        // different times (a one-wide layer norm would hide them).
        let mut rng = Rng::seeded(2);
        let mut net = FlowNet::new(&mut rng, 1, 8, Backbone::PlainMlp).unwrap();
        for v in net.out.w.data_mut().iter_mut() {
            *v = 0.03;
        }
        let c = cands(&[(0, 0.4)]);
        let ea = velocity_errors(&net, &[1.0], &c, 1, &[0.1], SM).unwrap()[0];
        let eb = velocity_errors(&net, &[1.0], &c, 1, &[0.9], SM).unwrap()[0];
        let avg = velocity_errors(&net, &[1.0], &c, 1, &[0.1, 0.9], SM).unwrap()[0];
        assert!((avg - 0.5 * (ea + eb)).abs() < 1e-15);
        assert_ne!(ea, eb);
    }

    #[test]
    fn gzsl_gate_hand_example() {
        // Hand arithmetic with a zero field: seen error 0.500005, unseen
        // error 1 - 0.9 * 0.99999 = 0.100009; their ratio is about 5, above
        // gamma = 0.75, so the penalty lands on the seen class.
        let net = zero_net(1);
        let cfg = PredictConfig::default();
        let e_u = velocity_error(&net, &[1.0], &[0.9], 1, cfg.t, SM).unwrap();
        assert!((e_u - 0.100009).abs() < 1e-12, "{e_u}");
        let pick = gzsl_predict(
            &net,
            &[1.0],
            &cands(&[(0, 0.5)]),
            &cands(&[(1, 0.9)]),
            1,
            &cfg,
        )
        .unwrap();
        assert_eq!(pick, 1);
    }

    #[test]
    fn gzsl_gamma_extremes() {
        let net = zero_net(1);
        let seen = cands(&[(0, 0.5)]);
        let unseen = cands(&[(1, 0.9)]);
        // Huge gamma: the ratio test always passes, penalty on unseen.
        let wide = PredictConfig { gamma: 1e12, ..PredictConfig::default() };
        assert_eq!(gzsl_predict(&net, &[1.0], &seen, &unseen, 1, &wide).unwrap(), 0);
        // Zero gamma with all errors positive: penalty on seen.
        let narrow = PredictConfig { gamma: 0.0, ..PredictConfig::default() };
        assert_eq!(gzsl_predict(&net, &[1.0], &seen, &unseen, 1, &narrow).unwrap(), 1);
    }

    #[test]
    fn gzsl_double_zero_ratio_is_neutral() {
        // All latents zero: every error is exactly zero, so the ratio is
        // defined as 1 and compared against gamma.
        let net = zero_net(1);
        let seen = cands(&[(0, 0.0)]);
        let unseen = cands(&[(1, 0.0)]);
        let below = PredictConfig { gamma: 2.0, ..PredictConfig::default() };
        assert_eq!(gzsl_predict(&net, &[0.0], &seen, &unseen, 1, &below).unwrap(), 0);
        let above = PredictConfig { gamma: 0.75, ..PredictConfig::default() };
        assert_eq!(gzsl_predict(&net, &[0.0], &seen, &unseen, 1, &above).unwrap(), 1);
    }

    #[test]
    fn gzsl_requires_both_domains() {
        let net = zero_net(1);
        let cfg = PredictConfig::default();
        assert!(matches!(
            gzsl_predict(&net, &[1.0], &[], &cands(&[(1, 0.9)]), 1, &cfg),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn config_validation_guards_ranges() {
        assert!(PredictConfig::default().validate().is_ok());
        let bad_t = PredictConfig { t: 1.0, ..PredictConfig::default() };
        assert!(bad_t.validate().is_err());
        let bad_gamma = PredictConfig { gamma: -0.1, ..PredictConfig::default() };
        assert!(bad_gamma.validate().is_err());
        let zero_gamma = PredictConfig { gamma: 0.0, ..PredictConfig::default() };
        assert!(zero_gamma.validate().is_ok());
        let bad_alpha = PredictConfig { alpha: 1e6, ..PredictConfig::default() };
        assert!(bad_alpha.validate().is_err());
    }

    fn synthetic_split(seen: &[u32], unseen: &[u32]) -> SplitSpec {
        SplitSpec::new(seen.to_vec(), unseen.to_vec()).unwrap()
    }

    fn constructed_gzsl(s_correct: u64, u_correct: u64, per_domain: u64) -> EvalReport {
        let split = synthetic_split(&[0], &[1]);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_domain {
            labels.push(0);
            preds.push(if i < s_correct { 0 } else { 1 });
        }
        for i in 0..per_domain {
            labels.push(1);
            preds.push(if i < u_correct { 1 } else { 0 });
        }
        evaluate(&preds, &labels, &split, Protocol::Gzsl, String::new(), 7).unwrap()
    }

    #[test]
    fn harmonic_mean_matches_published_rows() {
        let r = constructed_gzsl(777, 756, 1000);
        assert_eq!(pct(r.s), "77.7");
        assert_eq!(pct(r.u), "75.6");
        assert_eq!(pct(r.h), "76.6");
        let r = constructed_gzsl(669, 490, 1000);
        assert_eq!(pct(r.s), "66.9");
        assert_eq!(pct(r.u), "49.0");
        assert_eq!(pct(r.h), "56.6");
    }

    #[test]
    fn harmonic_mean_identities() {
        let r = constructed_gzsl(400, 400, 1000);
        assert!((r.h.unwrap() - r.s.unwrap()).abs() < 1e-12);
        let r = constructed_gzsl(400, 0, 1000);
        assert_eq!(r.h.unwrap(), 0.0);
        let r = constructed_gzsl(123, 877, 1000);
        let (s, u, h) = (r.s.unwrap(), r.u.unwrap(), r.h.unwrap());
        assert!((h - 2.0 * s * u / (s + u)).abs() < 1e-12);
    }

    #[test]
    fn evaluate_zsl_counts_and_guards() {
        let split = synthetic_split(&[0, 1], &[2, 3]);
        let labels = [2, 2, 3, 3];
        let preds = [2, 3, 3, 3];
        let r = evaluate(&preds, &labels, &split, Protocol::Zsl, "cfg".into(), 3).unwrap();
        assert_eq!(r.acc, Some(0.75));
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[0].accuracy, 0.5);
        assert_eq!(r.per_class[1].accuracy, 1.0);
        let cell = r.confusion.iter().find(|c| c.actual == 2 && c.predicted == 3).unwrap();
        assert_eq!(cell.count, 1);
        assert_eq!(r.seed, 3);
        assert_eq!(r.config_echo, "cfg");

        // Seen label under the zero-shot protocol is a contract violation.
        assert!(evaluate(&[0], &[0], &split, Protocol::Zsl, String::new(), 0).is_err());
        // Label outside the split.
        assert!(evaluate(&[9], &[9], &split, Protocol::Gzsl, String::new(), 0).is_err());
        // Misaligned arrays.
        assert!(evaluate(&[2, 3], &[2], &split, Protocol::Zsl, String::new(), 0).is_err());
    }

    #[test]
    fn report_serialization_is_stable() {
        let r = constructed_gzsl(3, 2, 4);
        let a = r.to_json().unwrap();
        let b = r.to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"protocol\": \"gzsl\""));
        let table = r.text_table();
        assert!(table.starts_with("Acc    S      U      H\n"));
        assert!(table.contains("75.0"));
        assert!(table.contains('-'));
    }

    #[test]
    fn similarity_baseline_hand_cosines() {
        let c = vec![
            ClassLatent { class: 0, z: vec![1.0, 0.0] },
            ClassLatent { class: 1, z: vec![1.0, 1.0] },
        ];
        assert_eq!(baseline_similarity(&[1.0, 1.0], &c, 1, 2).unwrap(), 1);
        let ortho = vec![
            ClassLatent { class: 0, z: vec![1.0, 0.0] },
            ClassLatent { class: 1, z: vec![0.0, 1.0] },
        ];
        assert_eq!(baseline_similarity(&[0.0, 1.0], &ortho, 1, 2).unwrap(), 1);
        // Exact self-match has similarity 1 and wins.
        let selfmatch = vec![
            ClassLatent { class: 0, z: vec![0.5, -0.5] },
            ClassLatent { class: 1, z: vec![-0.5, 0.5] },
        ];
        assert_eq!(baseline_similarity(&[0.5, -0.5], &selfmatch, 1, 2).unwrap(), 0);
        assert!(matches!(
            baseline_similarity(&[0.0, 0.0], &ortho, 1, 2),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn linear_probe_separates_clusters() {
        // Two well-separated clusters in 2-D; the probe must fit them
        // perfectly, deterministically.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            features.extend([5.0 + 0.01 * i as f64, 0.0]);
            labels.push(4u32);
            features.extend([-5.0 - 0.01 * i as f64, 0.1]);
            labels.push(9u32);
        }
        let clf =
            train_linear_classifier(&features, 20, 2, &labels, &[4, 9], 200, 0.5).unwrap();
        for i in 0..20 {
            let x = &features[i * 2..i * 2 + 2];
            assert_eq!(clf.classify(x).unwrap(), labels[i]);
        }
        let again =
            train_linear_classifier(&features, 20, 2, &labels, &[4, 9], 200, 0.5).unwrap();
        assert_eq!(clf, again);
    }

    #[test]
    fn baseline_linear_guards() {
        let mut rng = Rng::seeded(5);
        let cfg = AlignConfig { latent_dim: 3, hidden: 6, ..AlignConfig::default() };
        let mut pair = VaePair::new(&mut rng, 4, 3, &cfg).unwrap();
        let semantic = FeaturePack::new(
            crate::data::fpack::PackKind::Semantic,
            1,
            3,
            vec![0, 1],
            vec![0.1; 6],
        )
        .unwrap();
        let split = synthetic_split(&[0], &[1]);
        let pcfg = PredictConfig::default();
        // Unfrozen alignment model is rejected.
        assert!(matches!(
            baseline_linear(&pair, &semantic, &split, &mut Rng::seeded(1), &pcfg),
            Err(Error::VaeNotFrozen)
        ));
        pair.freeze();
        let zero = PredictConfig { n_synth: 0, ..PredictConfig::default() };
        assert!(matches!(
            baseline_linear(&pair, &semantic, &split, &mut Rng::seeded(1), &zero),
            Err(Error::Config(_))
        ));
        // Deterministic in seed.
        let a = baseline_linear(&pair, &semantic, &split, &mut Rng::seeded(2), &pcfg).unwrap();
        let b = baseline_linear(&pair, &semantic, &split, &mut Rng::seeded(2), &pcfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.classes, vec![1]);
    }

    proptest! {
        #[test]
        fn argmin_invariant_under_increasing_transforms(
            errs in proptest::collection::vec(0.0f64..10.0, 1..12)
        ) {
            let pairs: Vec<(u32, f64)> =
                errs.iter().enumerate().map(|(i, &e)| (i as u32, e)).collect();
            let base = argmin_class(&pairs).unwrap();
            for transform in [|x: f64| 2.0 * x + 3.0, |x: f64| x.exp(), |x: f64| x.atan()] {
                let mapped: Vec<(u32, f64)> =
                    pairs.iter().map(|&(c, e)| (c, transform(e))).collect();
                prop_assert_eq!(argmin_class(&mapped).unwrap(), base);
            }
        }
    }
}
