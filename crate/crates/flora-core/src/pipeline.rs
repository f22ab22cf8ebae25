//! End-to-end orchestration: attune semantics, train the alignment pair,
//! freeze it, train the velocity net on the induced latents, and evaluate
//! either protocol from one deterministic seed.

use crate::align::{train_align, AlignConfig, AlignTraceRow, VaePair};
use crate::attune::{attune_pack, AttuneConfig};
use crate::data::fpack::{FeaturePack, PackKind};
use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::flow::{
    encode_latents, train_flow, FlowNet, FlowTraceRow, FlowTrainConfig, LatentSet,
};
use crate::numerics::rng::{DrawCounts, Rng};
use crate::predict::{
    baseline_linear, baseline_similarity, evaluate, gzsl_predict, zsl_predict, ClassLatent,
    EvalReport, PredictConfig, Protocol,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub attune: AttuneConfig,
    pub align: AlignConfig,
    pub flow: FlowTrainConfig,
    pub predict: PredictConfig,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.attune.validate()?;
        self.align.validate()?;
        self.flow.validate()?;
        self.predict.validate()
    }
}

/// Everything the two training stages produce.
#[derive(Debug)]
pub struct TrainedModels {
    /// Frozen after stage 1.
    pub pair: VaePair,
    pub net: FlowNet,
    /// The semantic pack actually used downstream (post-attunement).
    pub attuned: FeaturePack,
    pub align_trace: Vec<AlignTraceRow>,
    pub flow_trace: Vec<FlowTraceRow>,
    /// Draw counters straddling stage 2, for the noise-free audit.
    pub counts_before_flow: DrawCounts,
    pub counts_after_flow: DrawCounts,
}

fn check_packs(skeleton: &FeaturePack, semantic: &FeaturePack, split: &SplitSpec) -> Result<()> {
    skeleton.validate()?;
    semantic.validate()?;
    if skeleton.kind != PackKind::Skeleton || semantic.kind != PackKind::Semantic {
        return Err(Error::PackLabels(
            "expected a skeleton pack and a semantic pack, in that order".into(),
        ));
    }
    if semantic.n_items() != split.n_classes() {
        return Err(Error::SplitPackMismatch(format!(
            "semantic pack holds {} classes, split declares {}",
            semantic.n_items(),
            split.n_classes()
        )));
    }
    Ok(())
}

/// Run both training stages from a single seed.
pub fn train_two_stage(
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
    split: &SplitSpec,
    cfg: &PipelineConfig,
) -> Result<TrainedModels> {
    cfg.validate()?;
    check_packs(skeleton, semantic, split)?;
    let mut rng = Rng::seeded(cfg.seed);

    let attuned = attune_pack(semantic, &cfg.attune)?;
    let mut pair = VaePair::new(
        &mut rng,
        skeleton.dim as usize,
        attuned.dim as usize,
        &cfg.align,
    )?;
    let align_trace = train_align(&mut pair, skeleton, &attuned, split, &cfg.align, &mut rng)?;
    pair.freeze();

    let mut net = FlowNet::new(
        &mut rng,
        cfg.align.latent_dim,
        cfg.flow.hidden,
        cfg.flow.backbone,
    )?;
    let counts_before_flow = rng.counts();
    let flow_trace = train_flow(&mut net, &pair, skeleton, &attuned, split, &cfg.flow, &mut rng)?;
    let counts_after_flow = rng.counts();

    Ok(TrainedModels {
        pair,
        net,
        attuned,
        align_trace,
        flow_trace,
        counts_before_flow,
        counts_after_flow,
    })
}

/// Mean-mode candidate latents for the given class ids.
pub fn latent_candidates(latents: &LatentSet, classes: &[u32]) -> Vec<ClassLatent> {
    classes
        .iter()
        .map(|&c| ClassLatent { class: c, z: latents.class_sources[c as usize].clone() })
        .collect()
}

/// Classify every admissible test item and score the result. Zero-shot
/// scores unseen-labeled items against unseen candidates; the generalized
/// protocol scores every item against both domains.
pub fn evaluate_protocol(
    models: &TrainedModels,
    skeleton: &FeaturePack,
    split: &SplitSpec,
    protocol: Protocol,
    cfg: &PredictConfig,
    config_echo: String,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_packs(skeleton, &models.attuned, split)?;
    let latents = encode_latents(&models.pair, skeleton, &models.attuned)?;
    let seen_cands = latent_candidates(&latents, split.seen());
    let unseen_cands = latent_candidates(&latents, split.unseen());

    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..skeleton.n_items() as usize {
        let label = skeleton.labels[i];
        let z_s = &latents.item_targets[i];
        let pick = match protocol {
            Protocol::Zsl => {
                if split.is_seen(label) {
                    continue;
                }
                zsl_predict(&models.net, z_s, &unseen_cands, latents.tokens, cfg)?
            }
            Protocol::Gzsl => {
                gzsl_predict(&models.net, z_s, &seen_cands, &unseen_cands, latents.tokens, cfg)?
            }
        };
        preds.push(pick);
        labels.push(label);
    }
    evaluate(&preds, &labels, split, protocol, config_echo, seed)
}

/// Zero-shot scoring of the pooled-cosine baseline on the same latents.
pub fn evaluate_baseline_similarity(
    models: &TrainedModels,
    skeleton: &FeaturePack,
    split: &SplitSpec,
    config_echo: String,
    seed: u64,
) -> Result<EvalReport> {
    check_packs(skeleton, &models.attuned, split)?;
    let latents = encode_latents(&models.pair, skeleton, &models.attuned)?;
    let unseen_cands = latent_candidates(&latents, split.unseen());
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..skeleton.n_items() as usize {
        let label = skeleton.labels[i];
        if split.is_seen(label) {
            continue;
        }
        preds.push(baseline_similarity(
            &latents.item_targets[i],
            &unseen_cands,
            latents.tokens,
            latents.latent_dim,
        )?);
        labels.push(label);
    }
    evaluate(&preds, &labels, split, Protocol::Zsl, config_echo, seed)
}

/// Zero-shot scoring of the feature-synthesis baseline: train the linear
/// probe on decoded samples, then classify raw unseen skeleton features.
pub fn evaluate_baseline_linear(
    models: &TrainedModels,
    skeleton: &FeaturePack,
    split: &SplitSpec,
    rng: &mut Rng,
    cfg: &PredictConfig,
    config_echo: String,
    seed: u64,
) -> Result<EvalReport> {
    check_packs(skeleton, &models.attuned, split)?;
    let clf = baseline_linear(&models.pair, &models.attuned, split, rng, cfg)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..skeleton.n_items() as usize {
        let label = skeleton.labels[i];
        if split.is_seen(label) {
            continue;
        }
        preds.push(clf.classify(&skeleton.item_f64(i))?);
        labels.push(label);
    }
    evaluate(&preds, &labels, split, Protocol::Zsl, config_echo, seed)
}
