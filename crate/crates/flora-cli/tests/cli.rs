//! End-to-end tests of the `flora` binary: every subcommand is exercised
//! against a miniature benchmark in a temporary directory, and the exit-code
//! contract (0 success, 1 usage, 2 data) is pinned down.

use std::path::Path;
use std::process::{Command, Output};

use flora_core::data::fpack::{FeaturePack, PackKind};

/// Miniature benchmark: small enough that a full train runs in well under a
/// second, structured enough that accuracies are meaningful.
const CONFIG: &str = "\
seed = 3

[gen]
n_classes = 6
n_unseen = 2
samples_per_class = 8
d_s = 16
d_a = 12
tokens = 2
spread = 0.3
coupling = 0.8
seed = 3

[align]
latent_dim = 8
hidden = 32
iterations = 60
batch = 16
lr = 1e-3

[flow]
iterations = 40
batch = 16
hidden = 32
lr = 1e-3
";

fn write_config(dir: &Path) {
    std::fs::write(dir.join("run.toml"), CONFIG).expect("write config");
}

fn flora(dir: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flora"));
    cmd.current_dir(dir)
        .env_remove("FLORA_SEED")
        .args(["--config", "run.toml"])
        .args(args);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn flora")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout_of(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout_of(&out)
}

fn fails_with(cmd: &mut Command, code: i32) -> String {
    let out = run(cmd);
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout: {}\nstderr: {}",
        stdout_of(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("read {rel}: {e}"))
}

/// gen + train in a fresh tempdir; returns the directory handle.
fn trained_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    ok(&mut flora(dir.path(), &["gen"]));
    ok(&mut flora(dir.path(), &["train"]));
    dir
}

// ── happy path ──────────────────────────────────────────────────────────

#[test]
fn generate_writes_benchmark_files() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    let out = ok(&mut flora(dir.path(), &["gen"]));
    assert!(out.contains("48 items across 6 classes (2 unseen)"), "stdout: {out}");
    assert!(out.contains("nearest-centroid sanity:"), "stdout: {out}");
    for rel in ["data/skeleton.fpack", "data/semantic.fpack", "data/split.json", "data/manifest.json"]
    {
        assert!(dir.path().join(rel).is_file(), "{rel} missing after gen");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "data/manifest.json")).expect("manifest json");
    assert_eq!(manifest["gen"]["n_classes"], 6);
    let oracle = manifest["oracle_nearest_centroid"].as_f64().expect("oracle");
    assert!(oracle > 0.5, "nearest-centroid oracle {oracle} suspiciously low");

    let pack = FeaturePack::from_bytes(&read(dir.path(), "data/skeleton.fpack")).expect("pack");
    assert_eq!(pack.kind, PackKind::Skeleton);
    // Skeleton items are single-token; the tokens knob shapes the semantic pack.
    assert_eq!((pack.n_items(), pack.tokens, pack.dim), (48, 1, 16));
    let sem = FeaturePack::from_bytes(&read(dir.path(), "data/semantic.fpack")).expect("pack");
    assert_eq!((sem.n_items(), sem.tokens, sem.dim), (6, 2, 12));
}

#[test]
fn train_then_eval_covers_both_protocols_and_all_classifiers() {
    let dir = trained_dir();
    for rel in [
        "checkpoints/align.ckpt",
        "checkpoints/flow.ckpt",
        "checkpoints/align_trace.csv",
        "checkpoints/flow_trace.csv",
    ] {
        assert!(dir.path().join(rel).is_file(), "{rel} missing after train");
    }
    let trace = String::from_utf8(read(dir.path(), "checkpoints/flow_trace.csv")).expect("utf8");
    assert_eq!(trace.lines().count(), 41, "header plus one row per iteration");

    let out = ok(&mut flora(dir.path(), &["eval"]));
    assert!(out.contains("zsl"), "stdout: {out}");
    let report: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "reports/report_zsl_flow.json")).expect("json");
    let acc = report["acc"].as_f64().expect("zero-shot accuracy");
    assert!((0.0..=1.0).contains(&acc), "acc {acc} outside [0, 1]");
    assert!(report["s"].is_null() && report["h"].is_null());

    ok(&mut flora(dir.path(), &["eval", "--protocol", "gzsl"]));
    let report: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "reports/report_gzsl_flow.json")).expect("json");
    assert!(report["acc"].is_null());
    for key in ["s", "u", "h"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v} outside [0, 1]");
    }

    ok(&mut flora(dir.path(), &["eval", "--classifier", "similarity"]));
    ok(&mut flora(dir.path(), &["eval", "--classifier", "linear"]));
    assert!(dir.path().join("reports/report_zsl_similarity.json").is_file());
    assert!(dir.path().join("reports/report_zsl_linear.json").is_file());
}

#[test]
fn training_audit_reports_zero_gaussian_draws() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    ok(&mut flora(dir.path(), &["gen"]));
    let out = ok(&mut flora(dir.path(), &["train"]));
    assert!(
        out.contains("stage 2 drew 0 Gaussian samples"),
        "audit line missing or nonzero: {out}"
    );
}

// ── determinism ─────────────────────────────────────────────────────────

#[test]
fn identical_configs_rerun_to_identical_bytes() {
    let artifacts = [
        "data/skeleton.fpack",
        "data/semantic.fpack",
        "data/split.json",
        "data/manifest.json",
        "checkpoints/align.ckpt",
        "checkpoints/flow.ckpt",
        "checkpoints/align_trace.csv",
        "checkpoints/flow_trace.csv",
        "reports/report_zsl_flow.json",
        "reports/report_zsl_flow.txt",
        "reports/report_gzsl_flow.json",
    ];
    let run_all = || -> (tempfile::TempDir, Vec<Vec<u8>>) {
        let dir = trained_dir();
        ok(&mut flora(dir.path(), &["eval"]));
        ok(&mut flora(dir.path(), &["eval", "--protocol", "gzsl"]));
        let bytes = artifacts.iter().map(|rel| read(dir.path(), rel)).collect();
        (dir, bytes)
    };
    let (_a, first) = run_all();
    let (_b, second) = run_all();
    for (rel, (x, y)) in artifacts.iter().zip(first.iter().zip(&second)) {
        assert_eq!(x, y, "{rel} differs between identical reruns");
    }
}

#[test]
fn seed_env_var_overrides_the_config_file() {
    let base = trained_dir();

    // Same config, seed forced to the file's value: bytes must match.
    let same = tempfile::tempdir().expect("tempdir");
    write_config(same.path());
    ok(&mut flora(same.path(), &["gen"]));
    ok(flora(same.path(), &["train"]).env("FLORA_SEED", "3"));
    assert_eq!(
        read(base.path(), "checkpoints/flow.ckpt"),
        read(same.path(), "checkpoints/flow.ckpt"),
        "FLORA_SEED equal to the file seed changed the run"
    );

    // A different seed must change the trained weights (generation is pinned
    // by its own seed and stays identical).
    let other = tempfile::tempdir().expect("tempdir");
    write_config(other.path());
    ok(&mut flora(other.path(), &["gen"]));
    ok(flora(other.path(), &["train"]).env("FLORA_SEED", "4"));
    assert_eq!(
        read(base.path(), "data/skeleton.fpack"),
        read(other.path(), "data/skeleton.fpack"),
        "generation must not depend on the run seed"
    );
    assert_ne!(
        read(base.path(), "checkpoints/flow.ckpt"),
        read(other.path(), "checkpoints/flow.ckpt"),
        "changing the seed left the trained weights untouched"
    );

    let bad = tempfile::tempdir().expect("tempdir");
    write_config(bad.path());
    fails_with(flora(bad.path(), &["gen"]).env("FLORA_SEED", "abc"), 1);
}

#[test]
fn set_overrides_change_the_generated_benchmark() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    ok(&mut flora(
        dir.path(),
        &["--set", "gen.n_classes=5", "--set", "gen.n_unseen=1", "gen"],
    ));
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "data/manifest.json")).expect("manifest json");
    assert_eq!(manifest["gen"]["n_classes"], 5);
    let split: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "data/split.json")).expect("split json");
    assert_eq!(split["unseen"].as_array().expect("unseen").len(), 1);
    assert_eq!(split["seen"].as_array().expect("seen").len(), 4);
}

// ── sweeps ──────────────────────────────────────────────────────────────

#[test]
fn sweep_writes_one_csv_row_per_value() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    // Scoring-only axis: one training run serves all three values.
    let out = ok(&mut flora(dir.path(), &["sweep", "--axis", "t", "--values", "0.1,0.5,0.9"]));
    assert!(out.contains("3 rows"), "stdout: {out}");
    let csv = String::from_utf8(read(dir.path(), "reports/sweep_t.csv")).expect("utf8");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,acc,s,u,h");
    assert_eq!(lines.len(), 4);
    for (line, want) in lines[1..].iter().zip(["t,0.1,", "t,0.5,", "t,0.9,"]) {
        assert!(line.starts_with(want), "row {line:?} does not start with {want:?}");
        let acc: f64 = line.split(',').nth(2).expect("acc cell").parse().expect("acc number");
        assert!((0.0..=1.0).contains(&acc));
    }

    // Gated sweep reports domain metrics instead of overall accuracy.
    ok(&mut flora(dir.path(), &["sweep", "--axis", "gamma", "--values", "0,1e12"]));
    let csv = String::from_utf8(read(dir.path(), "reports/sweep_gamma.csv")).expect("utf8");
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[2], "", "gated rows must leave the overall column empty");
        assert!(!cells[5].is_empty(), "gated rows must fill the harmonic column");
    }

    // Retraining axis: distinct models per value, one row each.
    ok(&mut flora(dir.path(), &["sweep", "--axis", "lambda_flow", "--values", "0,0.1"]));
    let csv = String::from_utf8(read(dir.path(), "reports/sweep_lambda_flow.csv")).expect("utf8");
    assert_eq!(csv.lines().count(), 3);
}

// ── inspect ─────────────────────────────────────────────────────────────

#[test]
fn inspect_describes_every_artifact_kind() {
    let dir = trained_dir();

    let out = ok(&mut flora(dir.path(), &["inspect", "data/skeleton.fpack"]));
    assert!(out.contains("feature pack (skeleton)"), "stdout: {out}");
    assert!(out.contains("items:  48"), "stdout: {out}");

    let out = ok(&mut flora(dir.path(), &["inspect", "data/semantic.fpack"]));
    assert!(out.contains("feature pack (semantic)"), "stdout: {out}");

    let out = ok(&mut flora(dir.path(), &["inspect", "checkpoints/align.ckpt"]));
    assert!(out.contains("checkpoint"), "stdout: {out}");
    assert!(out.contains("[16 x 32]") || out.contains("[32 x 16]"), "stdout: {out}");

    let out = ok(&mut flora(dir.path(), &["inspect", "data/split.json"]));
    assert!(out.contains("class split"), "stdout: {out}");
    assert!(out.contains("classes: 6"), "stdout: {out}");
}

#[test]
fn inspect_exports_item_latents_that_parse_back() {
    let dir = trained_dir();
    let out = ok(&mut flora(
        dir.path(),
        &["inspect", "data/skeleton.fpack", "--export-latents", "out/latents.fpack"],
    ));
    assert!(out.contains("exported 48 item latents"), "stdout: {out}");
    let pack = FeaturePack::from_bytes(&read(dir.path(), "out/latents.fpack")).expect("latents");
    assert_eq!(pack.kind, PackKind::Skeleton);
    assert_eq!((pack.n_items(), pack.tokens, pack.dim), (48, 1, 8));
    let original = FeaturePack::from_bytes(&read(dir.path(), "data/skeleton.fpack")).expect("pack");
    assert_eq!(pack.labels, original.labels, "export must keep item order and labels");
    // Exported latents are themselves inspectable.
    let out = ok(&mut flora(dir.path(), &["inspect", "out/latents.fpack"]));
    assert!(out.contains("dim:    8"), "stdout: {out}");
}

// ── failure contract ────────────────────────────────────────────────────

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    fails_with(&mut flora(dir.path(), &["--frobnicate"]), 1);
    fails_with(&mut flora(dir.path(), &["frobnicate"]), 1);
    let err = fails_with(&mut flora(dir.path(), &["eval", "--protocol", "gzsl", "--classifier", "similarity"]), 1);
    assert!(err.contains("zero-shot only"), "stderr: {err}");
    fails_with(&mut flora(dir.path(), &["eval", "--protocol", "gzsl", "--classifier", "linear"]), 1);
    fails_with(&mut flora(dir.path(), &["--set", "align.lr", "gen"]), 1);
    fails_with(&mut flora(dir.path(), &["--set", "alinn.lr=0.1", "gen"]), 1);
    fails_with(&mut flora(dir.path(), &["--set", "flow.sigma_min=-1", "gen"]), 1);
    let err = fails_with(&mut flora(dir.path(), &["sweep", "--axis", "bogus", "--values", "1"]), 1);
    assert!(err.contains("unknown sweep axis"), "stderr: {err}");
    fails_with(&mut flora(dir.path(), &["sweep", "--axis", "t", "--values", ","]), 1);
}

#[test]
fn missing_or_corrupt_inputs_exit_two() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_config(dir.path());
    // Nothing generated yet.
    let err = fails_with(&mut flora(dir.path(), &["train"]), 2);
    assert!(err.contains("error:"), "stderr: {err}");
    fails_with(&mut flora(dir.path(), &["eval"]), 2);
    fails_with(&mut flora(dir.path(), &["inspect", "no/such/file"]), 2);

    // Generated but untrained: eval is missing its checkpoints.
    ok(&mut flora(dir.path(), &["gen"]));
    fails_with(&mut flora(dir.path(), &["eval"]), 2);

    // A corrupted pack is a data error, reported with its file name.
    let target = dir.path().join("data/skeleton.fpack");
    let mut bytes = std::fs::read(&target).expect("read pack");
    bytes[0] ^= 0xFF;
    std::fs::write(&target, &bytes).expect("corrupt pack");
    let err = fails_with(&mut flora(dir.path(), &["train"]), 2);
    assert!(err.contains("error:"), "stderr: {err}");

    // Not a pack, checkpoint, or split at all.
    std::fs::write(dir.path().join("junk.bin"), [0u8, 159, 146, 150]).expect("write junk");
    fails_with(&mut flora(dir.path(), &["inspect", "junk.bin"]), 2);
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    // --config points at a file that does not exist.
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flora"));
    cmd.current_dir(dir.path())
        .env_remove("FLORA_SEED")
        .args(["--config", "nope.toml", "gen"]);
    let out = run(&mut cmd);
    assert!(!out.status.success());
}
