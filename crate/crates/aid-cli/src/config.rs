//! Layered configuration: a TOML file of flat sections mirroring the core
//! config types, `--set section.key=value` overrides, and the `AID_SEED`
//! environment variable for the training seed. Unknown keys are rejected and
//! the fully resolved document is echoed into every run directory.
//!
//! Precedence: defaults < config file < AID_SEED < --set.

use std::path::{Path, PathBuf};

use aid_core::aid::AidConfig;
use aid_core::data::SyntheticSpec;
use aid_core::detector::DetectorSpec;
use aid_core::distill::{BaseLoss, DistillConfig};
use aid_core::eval::EvalSettings;
use aid_core::train::{LrSchedule, OptimizerKind, TrainConfig, TrainMode};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV_VAR: &str = "AID_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub flip_prob: f64,
    pub mode: TrainMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            grad_clip_norm: t.grad_clip_norm,
            flip_prob: t.flip_prob,
            mode: t.mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub fpn_strides: Vec<usize>,
    /// Defaults to `round(64 * width_multiplier)` when absent.
    pub fpn_channels: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            width_multiplier: 1.0,
            num_classes: 3,
            fpn_strides: DetectorSpec::DEFAULT_STRIDES.to_vec(),
            fpn_channels: None,
        }
    }
}

impl DetectorSection {
    pub fn resolve(&self) -> DetectorSpec {
        DetectorSpec {
            width_multiplier: self.width_multiplier,
            num_classes: self.num_classes,
            fpn_strides: self.fpn_strides.clone(),
            fpn_channels: self
                .fpn_channels
                .unwrap_or_else(|| DetectorSpec::default_fpn_channels(self.width_multiplier)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub base_loss: BaseLoss,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub temperature_t: f64,
    pub adapter_enabled: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            base_loss: d.base_loss,
            beta: d.beta,
            gamma: d.gamma,
            eta: d.eta,
            temperature_t: d.temperature_t,
            adapter_enabled: d.adapter_enabled,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `train/` and `val/` dataset subdirectories.
    pub dataset_dir: Option<PathBuf>,
    pub train_images: usize,
    pub val_images: usize,
    /// The validation split draws from `synthetic.seed + val_seed_offset`.
    pub val_seed_offset: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset_dir: None,
            train_images: 2000,
            val_images: 500,
            val_seed_offset: 1_000_000,
        }
    }
}

/// The full configuration document.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub train: TrainSection,
    pub detector: DetectorSection,
    pub distill: DistillSection,
    pub aid: AidConfig,
    pub synthetic: SyntheticSpec,
    pub data: DataSection,
    pub eval: EvalSettings,
}

impl AppConfig {
    /// Assemble the nested core training config.
    pub fn to_train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr.clone(),
            optimizer: self.train.optimizer,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            grad_clip_norm: self.train.grad_clip_norm,
            flip_prob: self.train.flip_prob,
            mode,
            distill: DistillConfig {
                base_loss: self.distill.base_loss,
                beta: self.distill.beta,
                gamma: self.distill.gamma,
                eta: self.distill.eta,
                temperature_t: self.distill.temperature_t,
                adapter_enabled: self.distill.adapter_enabled,
                aid: self.aid.clone(),
            },
            detector: self.detector.resolve(),
            eval: self.eval,
        }
    }

    /// Synthetic specs for the train and val splits.
    pub fn synthetic_splits(&self) -> (SyntheticSpec, SyntheticSpec) {
        let train = SyntheticSpec { num_images: self.data.train_images, ..self.synthetic.clone() };
        let val = SyntheticSpec {
            num_images: self.data.val_images,
            seed: self.synthetic.seed.wrapping_add(self.data.val_seed_offset),
            ..self.synthetic.clone()
        };
        (train, val)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config(self.train.mode)
            .validate()
            .map_err(|e| anyhow!("invalid config: {e}"))?;
        self.synthetic.validate().map_err(|e| anyhow!("invalid [synthetic] config: {e}"))?;
        if self.data.train_images == 0 || self.data.val_images == 0 {
            bail!("invalid [data] config: split sizes must be >= 1");
        }
        Ok(())
    }
}

fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("bad --set key {path:?}");
    }
    // Parse the value as TOML; fall back to a bare string.
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set {path}: {seg} is not a table"))?
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| anyhow!("--set {path}: parent is not a table"))?
        .insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// Load, override and validate the configuration.
///
/// `overrides` are `key=value` pairs with dotted section paths
/// (`--set aid.alpha=0`); `AID_SEED` overrides `train.seed` between the file
/// and the explicit overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let mut value: toml::Value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            // Deserialize once into the typed config to reject unknown keys
            // with a good error, then continue on the raw tree.
            let _typed: AppConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            toml::from_str(&text)?
        }
        None => toml::Value::try_from(AppConfig::default())?,
    };

    if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
        let seed: u64 =
            seed.parse().with_context(|| format!("{SEED_ENV_VAR}={seed} is not a seed"))?;
        set_path(&mut value, "train.seed", &seed.to_string())?;
    }
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {entry:?}"))?;
        set_path(&mut value, key.trim(), raw.trim())?;
    }

    let cfg: AppConfig = value.try_into().context("applying overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize the resolved config for the run-directory echo.
pub fn echo_config(cfg: &AppConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

pub fn parse_mode(s: &str) -> Result<TrainMode> {
    Ok(match s {
        "teacher" => TrainMode::Teacher,
        "no_kd_student" => TrainMode::NoKdStudent,
        "uniform_kd" => TrainMode::UniformKd,
        "aid_kd" => TrainMode::AidKd,
        "self_distill" => TrainMode::SelfDistill,
        other => bail!(
            "unknown mode {other:?} (expected teacher, no_kd_student, uniform_kd, aid_kd or self_distill)"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = resolve_config(None, &[]).unwrap();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.aid.alpha, 0.1);
    }

    #[test]
    fn set_overrides_roundtrip() {
        let cfg = resolve_config(
            None,
            &["aid.alpha=0".into(), "train.batch_size=8".into(), "detector.width_multiplier=2.0".into()],
        )
        .unwrap();
        assert_eq!(cfg.aid.alpha, 0.0);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.detector.width_multiplier, 2.0);
        let echoed = echo_config(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(back.aid.alpha, 0.0);
        assert_eq!(back.train.batch_size, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(resolve_config(None, &["aid.alhpa=0".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[aid]\nbogus_key = 1\n").unwrap();
        assert!(resolve_config(Some(&path), &[]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(resolve_config(None, &["aid.alpha=-1".into()]).is_err());
        assert!(resolve_config(None, &["train.epochs=0".into()]).is_err());
    }

    #[test]
    fn nested_lr_override() {
        let cfg = resolve_config(None, &["train.lr.initial=0.5".into()]).unwrap();
        assert_eq!(cfg.train.lr.initial, 0.5);
    }
}
