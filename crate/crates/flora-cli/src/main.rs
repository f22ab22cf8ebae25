//! `flora` — generate the synthetic benchmark, train the two-stage model,
//! score it under either protocol, sweep hyperparameters, and inspect
//! artifacts. Every command is a pure function of (config file, input
//! files, seed): reruns produce byte-identical outputs.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use flora_core::align::{encode, EncodeMode, VaePair};
use flora_core::align::align_trace_to_text;
use flora_core::attune::attune_pack;
use flora_core::checkpoint::{Checkpoint, CKPT_MAGIC};
use flora_core::data::fpack::{FeaturePack, PackKind, FPACK_MAGIC};
use flora_core::data::split::SplitSpec;
use flora_core::data::synth::{generate_synthetic, nearest_centroid_accuracy};
use flora_core::flow::{flow_trace_to_text, FlowNet};
use flora_core::numerics::rng::{DrawCounts, Rng};
use flora_core::pipeline::{
    evaluate_baseline_linear, evaluate_baseline_similarity, evaluate_protocol, train_two_stage,
    PipelineConfig, TrainedModels,
};
use flora_core::predict::{EvalReport, Protocol};
use flora_core::{Error, ErrorClass, Result};

use config::RunConfig;

const ALIGN_CKPT: &str = "align.ckpt";
const FLOW_CKPT: &str = "flow.ckpt";

#[derive(Parser)]
#[command(
    name = "flora",
    version,
    about = "Zero-shot skeleton action recognition on feature packs"
)]
struct Cli {
    /// TOML run configuration; omitted means built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set align.lr=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: two feature packs and a split.
    Gen,
    /// Train both stages; write checkpoints and loss traces.
    Train,
    /// Score a trained model and write a report.
    Eval {
        #[arg(long, value_enum, default_value_t = ProtocolArg::Zsl)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value_t = ClassifierArg::Flow)]
        classifier: ClassifierArg,
    },
    /// Rerun along one hyperparameter axis; write a CSV of metric vs value.
    Sweep {
        /// One of: t, k, tau, gamma, lambda_align, lambda_flow, tokens.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.1,0.5,0.9.
        #[arg(long)]
        values: String,
    },
    /// Print the header of a pack, checkpoint, or split file.
    Inspect {
        file: PathBuf,
        /// Also export mean-mode skeleton latents per item as a pack.
        #[arg(long, value_name = "OUT")]
        export_latents: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Zsl,
    Gzsl,
}

impl ProtocolArg {
    fn name(self) -> &'static str {
        match self {
            ProtocolArg::Zsl => "zsl",
            ProtocolArg::Gzsl => "gzsl",
        }
    }
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Zsl => Protocol::Zsl,
            ProtocolArg::Gzsl => Protocol::Gzsl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassifierArg {
    /// Velocity-error classifier over the trained field.
    Flow,
    /// Pooled-cosine similarity between latents.
    Similarity,
    /// Linear probe trained on decoded synthetic features.
    Linear,
}

impl ClassifierArg {
    fn name(self) -> &'static str {
        match self {
            ClassifierArg::Flow => "flow",
            ClassifierArg::Similarity => "similarity",
            ClassifierArg::Linear => "linear",
        }
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { protocol, classifier } => cmd_eval(&cfg, protocol, classifier),
        Command::Sweep { axis, values } => cmd_sweep(&cfg, &axis, &values),
        Command::Inspect { file, export_latents } => {
            cmd_inspect(&cfg, &file, export_latents.as_deref())
        }
    }
}

// ── file helpers ────────────────────────────────────────────────────────

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))
}

fn load_inputs(cfg: &RunConfig) -> Result<(FeaturePack, FeaturePack, SplitSpec)> {
    let skeleton = FeaturePack::read_file(&cfg.paths.skeleton)?;
    let semantic = FeaturePack::read_file(&cfg.paths.semantic)?;
    let split = SplitSpec::read_file(&cfg.paths.split)?;
    Ok((skeleton, semantic, split))
}

fn pipeline_config(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        attune: cfg.attune.clone(),
        align: cfg.align.clone(),
        flow: cfg.flow.clone(),
        predict: cfg.predict.clone(),
        seed: cfg.seed,
    }
}

// ── gen ─────────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct Manifest<'a> {
    gen: &'a flora_core::data::synth::SyntheticConfig,
    oracle_nearest_centroid: f64,
    files: ManifestFiles<'a>,
}

#[derive(serde::Serialize)]
struct ManifestFiles<'a> {
    skeleton: &'a Path,
    semantic: &'a Path,
    split: &'a Path,
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let (skeleton, semantic, split) = generate_synthetic(&cfg.gen)?;
    let classes: Vec<u32> = (0..cfg.gen.n_classes).collect();
    let oracle = nearest_centroid_accuracy(&skeleton, &classes)?;

    for p in [&cfg.paths.skeleton, &cfg.paths.semantic, &cfg.paths.split] {
        ensure_parent(p)?;
    }
    skeleton.write_file(&cfg.paths.skeleton)?;
    semantic.write_file(&cfg.paths.semantic)?;
    split.write_file(&cfg.paths.split)?;

    let manifest = Manifest {
        gen: &cfg.gen,
        oracle_nearest_centroid: oracle,
        files: ManifestFiles {
            skeleton: &cfg.paths.skeleton,
            semantic: &cfg.paths.semantic,
            split: &cfg.paths.split,
        },
    };
    let manifest_path = cfg
        .paths
        .skeleton
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot render manifest: {e}")))?;
    text.push('\n');
    write_text(&manifest_path, &text)?;

    println!(
        "generated {} items across {} classes ({} unseen), {} semantic rows",
        skeleton.n_items(),
        cfg.gen.n_classes,
        cfg.gen.n_unseen,
        semantic.n_items()
    );
    println!("nearest-centroid sanity: {:.1}%", oracle * 100.0);
    println!("wrote {}", cfg.paths.skeleton.display());
    println!("wrote {}", cfg.paths.semantic.display());
    println!("wrote {}", cfg.paths.split.display());
    println!("wrote {}", manifest_path.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (skeleton, semantic, split) = load_inputs(cfg)?;
    let models = train_two_stage(&skeleton, &semantic, &split, &pipeline_config(cfg))?;

    ensure_dir(&cfg.paths.checkpoint_dir)?;
    let align_path = cfg.paths.checkpoint_dir.join(ALIGN_CKPT);
    let flow_path = cfg.paths.checkpoint_dir.join(FLOW_CKPT);
    models.pair.to_checkpoint()?.write_file(&align_path)?;
    models.net.to_checkpoint()?.write_file(&flow_path)?;
    write_text(
        &cfg.paths.checkpoint_dir.join("align_trace.csv"),
        &align_trace_to_text(&models.align_trace),
    )?;
    write_text(
        &cfg.paths.checkpoint_dir.join("flow_trace.csv"),
        &flow_trace_to_text(&models.flow_trace),
    )?;

    if let (Some(first), Some(last)) = (models.align_trace.first(), models.align_trace.last()) {
        println!(
            "stage 1: alignment loss {:.6} -> {:.6} over {} iterations",
            first.l_align,
            last.l_align,
            models.align_trace.len()
        );
    }
    if let (Some(first), Some(last)) = (models.flow_trace.first(), models.flow_trace.last()) {
        println!(
            "stage 2: transport loss {:.6} -> {:.6} over {} iterations",
            first.loss,
            last.loss,
            models.flow_trace.len()
        );
    }
    let gaussians =
        models.counts_after_flow.noise_normal - models.counts_before_flow.noise_normal;
    println!("stage 2 drew {gaussians} Gaussian samples (audit expects 0)");
    println!("wrote {}", align_path.display());
    println!("wrote {}", flow_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn load_models(cfg: &RunConfig, semantic: &FeaturePack) -> Result<TrainedModels> {
    let attuned = attune_pack(semantic, &cfg.attune)?;
    let align_path = cfg.paths.checkpoint_dir.join(ALIGN_CKPT);
    let flow_path = cfg.paths.checkpoint_dir.join(FLOW_CKPT);
    let mut pair = VaePair::from_checkpoint(&Checkpoint::read_file(&align_path)?)?;
    pair.freeze();
    let net = FlowNet::from_checkpoint(&Checkpoint::read_file(&flow_path)?)?;
    Ok(TrainedModels {
        pair,
        net,
        attuned,
        align_trace: Vec::new(),
        flow_trace: Vec::new(),
        counts_before_flow: DrawCounts::default(),
        counts_after_flow: DrawCounts::default(),
    })
}

fn cmd_eval(cfg: &RunConfig, protocol: ProtocolArg, classifier: ClassifierArg) -> Result<()> {
    if protocol == ProtocolArg::Gzsl && classifier != ClassifierArg::Flow {
        return Err(Error::Config(format!(
            "the {} baseline is zero-shot only; use --protocol zsl",
            classifier.name()
        )));
    }
    let (skeleton, semantic, split) = load_inputs(cfg)?;
    let models = load_models(cfg, &semantic)?;
    let echo = cfg.echo()?;

    let report: EvalReport = match classifier {
        ClassifierArg::Flow => evaluate_protocol(
            &models,
            &skeleton,
            &split,
            protocol.into(),
            &cfg.predict,
            echo,
            cfg.seed,
        )?,
        ClassifierArg::Similarity => {
            evaluate_baseline_similarity(&models, &skeleton, &split, echo, cfg.seed)?
        }
        ClassifierArg::Linear => {
            let mut rng = Rng::seeded(cfg.seed);
            evaluate_baseline_linear(
                &models,
                &skeleton,
                &split,
                &mut rng,
                &cfg.predict,
                echo,
                cfg.seed,
            )?
        }
    };

    ensure_dir(&cfg.paths.report_dir)?;
    let stem = format!("report_{}_{}", protocol.name(), classifier.name());
    let json_path = cfg.paths.report_dir.join(format!("{stem}.json"));
    let txt_path = cfg.paths.report_dir.join(format!("{stem}.txt"));
    write_text(&json_path, &report.to_json()?)?;
    write_text(&txt_path, &report.text_table())?;
    print!("{}", report.text_table());
    println!("wrote {}", json_path.display());
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    T,
    K,
    Tau,
    Gamma,
    LambdaAlign,
    LambdaFlow,
    Tokens,
}

impl Axis {
    fn parse(raw: &str) -> Result<Axis> {
        match raw {
            "t" => Ok(Axis::T),
            "k" => Ok(Axis::K),
            "tau" | "τ" => Ok(Axis::Tau),
            "gamma" | "γ" => Ok(Axis::Gamma),
            "lambda_align" | "λ_align" | "λ_Align" => Ok(Axis::LambdaAlign),
            "lambda_flow" | "λ_flow" | "λ_Flow" => Ok(Axis::LambdaFlow),
            "tokens" => Ok(Axis::Tokens),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {raw:?}; expected one of t, k, tau, gamma, \
                 lambda_align, lambda_flow, tokens"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::T => "t",
            Axis::K => "k",
            Axis::Tau => "tau",
            Axis::Gamma => "gamma",
            Axis::LambdaAlign => "lambda_align",
            Axis::LambdaFlow => "lambda_flow",
            Axis::Tokens => "tokens",
        }
    }

    /// Whether the axis only changes scoring, so one trained model serves
    /// every value.
    fn reuses_model(self) -> bool {
        matches!(self, Axis::T | Axis::Gamma)
    }
}

fn parse_float_values(raw: &str, axis: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for tok in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::Config(format!("sweep {axis}: bad value {tok:?}")))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("sweep {axis}: value {tok:?} is not finite")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(out)
}

fn parse_int_values(raw: &str, axis: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for tok in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(
            tok.parse()
                .map_err(|_| Error::Config(format!("sweep {axis}: bad value {tok:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(out)
}

struct SweepRow {
    value: String,
    report: EvalReport,
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn sweep_csv(axis: Axis, rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,acc,s,u,h\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            axis.name(),
            row.value,
            csv_cell(row.report.acc),
            csv_cell(row.report.s),
            csv_cell(row.report.u),
            csv_cell(row.report.h),
        ));
    }
    out
}

fn train_and_score(
    cfg: &RunConfig,
    skeleton: &FeaturePack,
    semantic: &FeaturePack,
    split: &SplitSpec,
    protocol: Protocol,
) -> Result<EvalReport> {
    let models = train_two_stage(skeleton, semantic, split, &pipeline_config(cfg))?;
    evaluate_protocol(&models, skeleton, split, protocol, &cfg.predict, String::new(), cfg.seed)
}

fn cmd_sweep(cfg: &RunConfig, axis_raw: &str, values_raw: &str) -> Result<()> {
    let axis = Axis::parse(axis_raw)?;
    // Sweeps always run on the synthetic benchmark described by [gen], so a
    // sweep is reproducible from the config alone.
    let (skeleton, semantic, split) = generate_synthetic(&cfg.gen)?;
    let mut rows = Vec::new();

    if axis.reuses_model() {
        let models = train_two_stage(&skeleton, &semantic, &split, &pipeline_config(cfg))?;
        let protocol = if axis == Axis::Gamma { Protocol::Gzsl } else { Protocol::Zsl };
        for v in parse_float_values(values_raw, axis.name())? {
            let mut run = cfg.clone();
            match axis {
                Axis::T => run.predict.t = v,
                Axis::Gamma => run.predict.gamma = v,
                _ => unreachable!(),
            }
            run.predict.validate()?;
            let report = evaluate_protocol(
                &models,
                &skeleton,
                &split,
                protocol,
                &run.predict,
                String::new(),
                run.seed,
            )?;
            rows.push(SweepRow { value: format!("{v}"), report });
        }
    } else {
        match axis {
            Axis::K => {
                for v in parse_int_values(values_raw, axis.name())? {
                    let mut run = cfg.clone();
                    run.attune.k = v;
                    let report =
                        train_and_score(&run, &skeleton, &semantic, &split, Protocol::Zsl)?;
                    rows.push(SweepRow { value: format!("{v}"), report });
                }
            }
            Axis::Tau => {
                for v in parse_float_values(values_raw, axis.name())? {
                    let mut run = cfg.clone();
                    run.attune.tau = v;
                    run.attune.validate()?;
                    let report =
                        train_and_score(&run, &skeleton, &semantic, &split, Protocol::Zsl)?;
                    rows.push(SweepRow { value: format!("{v}"), report });
                }
            }
            Axis::LambdaAlign => {
                for v in parse_float_values(values_raw, axis.name())? {
                    let mut run = cfg.clone();
                    run.align.lambda_align = v;
                    run.align.validate()?;
                    let report =
                        train_and_score(&run, &skeleton, &semantic, &split, Protocol::Zsl)?;
                    rows.push(SweepRow { value: format!("{v}"), report });
                }
            }
            Axis::LambdaFlow => {
                for v in parse_float_values(values_raw, axis.name())? {
                    let mut run = cfg.clone();
                    run.flow.lambda_flow = v;
                    run.flow.validate()?;
                    let report =
                        train_and_score(&run, &skeleton, &semantic, &split, Protocol::Zsl)?;
                    rows.push(SweepRow { value: format!("{v}"), report });
                }
            }
            Axis::Tokens => {
                for v in parse_int_values(values_raw, axis.name())? {
                    let mut run = cfg.clone();
                    run.gen.tokens = v;
                    run.gen.validate()?;
                    let (skel_v, sem_v, split_v) = generate_synthetic(&run.gen)?;
                    let report = train_and_score(&run, &skel_v, &sem_v, &split_v, Protocol::Zsl)?;
                    rows.push(SweepRow { value: format!("{v}"), report });
                }
            }
            Axis::T | Axis::Gamma => unreachable!(),
        }
    }

    ensure_dir(&cfg.paths.report_dir)?;
    let path = cfg.paths.report_dir.join(format!("sweep_{}.csv", axis.name()));
    write_text(&path, &sweep_csv(axis, &rows))?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

// ── inspect ─────────────────────────────────────────────────────────────

fn inspect_pack(pack: &FeaturePack) {
    let kind = match pack.kind {
        PackKind::Skeleton => "skeleton",
        PackKind::Semantic => "semantic",
    };
    println!("feature pack ({kind})");
    println!("  items:  {}", pack.n_items());
    println!("  tokens: {}", pack.tokens);
    println!("  dim:    {}", pack.dim);
    let lo = pack.labels.iter().min().copied().unwrap_or(0);
    let hi = pack.labels.iter().max().copied().unwrap_or(0);
    let mut distinct: Vec<u32> = pack.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    println!("  labels: {} distinct in {lo}..={hi}", distinct.len());
}

fn inspect_checkpoint(c: &Checkpoint) {
    println!("checkpoint");
    for name in c.names() {
        let dims = c.block_dims(name).expect("listed name");
        if dims.iter().product::<usize>() == 1 {
            if let Ok(v) = c.scalar(name) {
                println!("  {name} = {v}");
                continue;
            }
        }
        let shape: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        println!("  {name}  [{}]", shape.join(" x "));
    }
}

fn export_latents(cfg: &RunConfig, out: &Path) -> Result<()> {
    let skeleton = FeaturePack::read_file(&cfg.paths.skeleton)?;
    let ckpt = Checkpoint::read_file(cfg.paths.checkpoint_dir.join(ALIGN_CKPT))?;
    let pair = VaePair::from_checkpoint(&ckpt)?;
    let tokens = skeleton.tokens as usize;
    let latent = pair.latent_dim();
    let mut features = Vec::with_capacity(skeleton.n_items() as usize * tokens * latent);
    for i in 0..skeleton.n_items() as usize {
        let (stats, _z) = encode(
            &pair.skeleton,
            &skeleton.item_f64(i),
            tokens,
            EncodeMode::Mean,
            None,
        )?;
        features.extend(stats.mu.iter().map(|&v| v as f32));
    }
    let pack = FeaturePack::new(
        PackKind::Skeleton,
        skeleton.tokens,
        latent as u32,
        skeleton.labels.clone(),
        features,
    )?;
    ensure_parent(out)?;
    pack.write_file(out)?;
    println!(
        "exported {} item latents ({} x {}) to {}",
        skeleton.n_items(),
        tokens,
        latent,
        out.display()
    );
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, file: &Path, export: Option<&Path>) -> Result<()> {
    let bytes = std::fs::read(file).map_err(|e| Error::io_at(file, e))?;
    if bytes.starts_with(FPACK_MAGIC) {
        inspect_pack(&FeaturePack::from_bytes(&bytes)?);
    } else if bytes.starts_with(CKPT_MAGIC) {
        inspect_checkpoint(&Checkpoint::from_bytes(&bytes)?);
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::SplitParse("not a pack, checkpoint, or split file".into()))?;
        let split = SplitSpec::from_json(text)?;
        println!("class split");
        println!("  classes: {}", split.n_classes());
        println!("  seen:    {:?}", split.seen());
        println!("  unseen:  {:?}", split.unseen());
    }
    if let Some(out) = export {
        export_latents(cfg, out)?;
    }
    Ok(())
}
