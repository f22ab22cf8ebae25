//! One declarative TOML file drives every command. Dotted-key `--set`
//! overrides are applied to the parsed document before deserialization, and
//! the `FLORA_SEED` environment variable overrides the seed last, so the
//! precedence is env > flag > file > built-in default.

use std::env;
use std::path::{Path, PathBuf};

use flora_core::align::AlignConfig;
use flora_core::attune::AttuneConfig;
use flora_core::data::synth::SyntheticConfig;
use flora_core::flow::FlowTrainConfig;
use flora_core::predict::PredictConfig;
use flora_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the input artifacts live and where outputs are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub skeleton: PathBuf,
    pub semantic: PathBuf,
    pub split: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            skeleton: "data/skeleton.fpack".into(),
            semantic: "data/semantic.fpack".into(),
            split: "data/split.json".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

/// Full run configuration. Every field has a default, so an empty file (or
/// no file at all) is a valid, fully reproducible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    /// Synthetic benchmark parameters, used by `gen` and by sweeps.
    pub gen: SyntheticConfig,
    pub attune: AttuneConfig,
    pub align: AlignConfig,
    pub flow: FlowTrainConfig,
    pub predict: PredictConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            paths: PathsConfig::default(),
            gen: SyntheticConfig::default(),
            attune: AttuneConfig::default(),
            align: AlignConfig::default(),
            flow: FlowTrainConfig::default(),
            predict: PredictConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.attune.validate()?;
        self.align.validate()?;
        self.flow.validate()?;
        self.predict.validate()
    }

    /// Canonical TOML rendering, embedded in reports so any result can be
    /// reproduced from its own echo.
    pub fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))
}

/// Parse one override value with TOML-like scalar inference: integer, then
/// float, then bool, falling back to a string. A comma-separated value
/// becomes an array (empty segments are dropped, so `0.5,` is a one-element
/// array).
fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    toml::Value::String(raw.to_string())
}

fn parse_override_value(raw: &str) -> toml::Value {
    if raw.contains(',') {
        toml::Value::Array(
            raw.split(',')
                .filter(|s| !s.is_empty())
                .map(parse_scalar)
                .collect(),
        )
    } else {
        parse_scalar(raw)
    }
}

/// Apply one `section.key=value` override to the parsed document.
fn apply_set(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set key {key:?} has an empty segment")));
    }
    let mut node = doc;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set key {key:?} descends into a non-table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("--set key {key:?} descends into a non-table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

/// Load, override, and validate the configuration.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Value = match path {
        Some(p) => read_text(p)?
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for spec in sets {
        apply_set(&mut doc, spec)?;
    }
    let mut cfg: RunConfig = doc
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Ok(raw) = env::var("FLORA_SEED") {
        cfg.seed = raw.parse().map_err(|_| {
            Error::Config(format!("FLORA_SEED must be an unsigned integer, got {raw:?}"))
        })?;
    }
    // There is exactly one path-straightening constant; the classifier must
    // score with the same one the velocity net was trained with.
    cfg.predict.sigma_min = cfg.flow.sigma_min;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.align.latent_dim, 64);
        assert_eq!(cfg.predict.sigma_min, cfg.flow.sigma_min);
    }

    #[test]
    fn set_overrides_reach_nested_sections() {
        let cfg = load(
            None,
            &[
                "seed=123".into(),
                "align.latent_dim=16".into(),
                "attune.tau=0.9".into(),
                "align.reg_mode=kl".into(),
                "predict.t_multi=0.1,0.5,".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.align.latent_dim, 16);
        assert!((cfg.attune.tau - 0.9).abs() < 1e-15);
        assert_eq!(cfg.predict.t_multi, vec![0.1, 0.5]);
    }

    #[test]
    fn unknown_keys_and_malformed_sets_are_usage_errors() {
        assert!(matches!(load(None, &["alinn.lr=0.1".into()]), Err(Error::Config(_))));
        assert!(matches!(load(None, &["align.lr".into()]), Err(Error::Config(_))));
        assert!(matches!(load(None, &["align..lr=0.1".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = load(None, &["align.lambda_align=0.25".into()]).unwrap();
        let echo = cfg.echo().unwrap();
        let reparsed: RunConfig = toml::from_str(&echo).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn file_and_overrides_compose() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 9\n[align]\nlatent_dim = 32\n").unwrap();
        let cfg = load(Some(&p), &["align.hidden=48".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.align.latent_dim, 32);
        assert_eq!(cfg.align.hidden, 48);
    }

    #[test]
    fn invalid_values_are_rejected_after_merge() {
        assert!(load(None, &["attune.tau=nan".into()]).is_err());
        assert!(load(None, &["flow.sigma_min=-1.0".into()]).is_err());
    }
}
