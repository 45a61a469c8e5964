//! Run configuration: one TOML document plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DropError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::retrieval::{Mode, ModeWeights};
use crate::synthetic::{AugmentConfig, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![20, 27],
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    /// Long 120-epoch schedule.
    pub fn full_scale() -> Self {
        Self {
            lr: 3.5e-4,
            decay_epochs: vec![40, 70],
            epochs: 120,
            ..Self::default()
        }
    }

    /// `lr * factor^(number of decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub identities: usize,
    pub instances: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            identities: 4,
            instances: 4,
        }
    }
}

impl BatchConfig {
    pub fn batch_size(&self) -> usize {
        self.identities * self.instances
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Stored batches `M`.
    pub batches: usize,
    pub reset_each_epoch: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            reset_each_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub every: usize,
    /// Mode used for best-checkpoint selection.
    pub select_mode: Mode,
    pub modes: Vec<Mode>,
    pub weights: ModeWeights,
    /// Query rows drawn in ranking strips.
    pub strips: usize,
    pub strip_top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 5,
            select_mode: Mode::FP,
            modes: Mode::table().to_vec(),
            weights: ModeWeights::default(),
            strips: 6,
            strip_top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: SyntheticConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub batch: BatchConfig,
    pub bank: BankConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DropError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies `a.b.c=value` assignments. Values parse as TOML literals and
    /// fall back to bare strings; the key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| DropError::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut tree;
            let path: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in path.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| DropError::Config(format!("{key}: {part} is not a table")))?;
                let slot = table
                    .get_mut(*part)
                    .ok_or_else(|| DropError::Config(format!("unknown config key {key}")))?;
                if i + 1 == path.len() {
                    *slot = value.clone();
                    break;
                }
                node = slot;
            }
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| DropError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        let (h, w) = (self.model.backbone.input_height, self.model.backbone.input_width);
        if (self.data.height, self.data.width) != (h, w) {
            return Err(DropError::Config(format!(
                "data resolution {}x{} differs from model input {h}x{w}",
                self.data.height, self.data.width
            )));
        }
        let o = &self.optim;
        if o.epochs == 0 || !(o.lr > 0.0) {
            return Err(DropError::Config("epochs and lr must be positive".into()));
        }
        if o.decay_epochs.windows(2).any(|w| w[0] >= w[1]) || o.decay_epochs.iter().any(|&d| d >= o.epochs) {
            return Err(DropError::Config(
                "decay epochs must be strictly increasing and below the epoch count".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(DropError::Config("invalid Adam hyperparameters".into()));
        }
        if self.batch.identities < 2 || self.batch.instances < 2 {
            return Err(DropError::Config(
                "batches need at least two identities with two instances each".into(),
            ));
        }
        if self.batch.identities > self.data.n_identities {
            return Err(DropError::Config("more identities per batch than in the dataset".into()));
        }
        if self.bank.batches == 0 {
            return Err(DropError::Config("memory bank needs at least one batch".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(DropError::Config("no evaluation modes".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let o = OptimConfig::full_scale();
        assert_eq!(o.lr_at(0), 3.5e-4);
        assert!((o.lr_at(40) - 3.5e-5).abs() < 1e-18);
        assert!((o.lr_at(70) - 3.5e-6).abs() < 1e-18);
        for e in 0..120 {
            let n = o.decay_epochs.iter().filter(|&&d| d <= e).count();
            assert_eq!(o.lr_at(e), o.lr * 0.1f64.powi(n as i32));
        }
    }

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch.batch_size(), 16);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "optim.lr=1e-3",
                "loss.triplet=part_average",
                "model.decouple=false",
                "eval.select_mode=G",
                "optim.decay_epochs=[3, 4]",
            ])
            .unwrap();
        assert_eq!(cfg.optim.lr, 1e-3);
        assert_eq!(cfg.loss.triplet, "part_average");
        assert!(!cfg.model.decouple);
        assert_eq!(cfg.eval.select_mode, Mode::G);
        assert_eq!(cfg.optim.decay_epochs, vec![3, 4]);
    }

    #[test]
    fn unknown_override_key_is_config_error() {
        let err = RunConfig::default().with_overrides(&["optim.nope=1"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::default().with_overrides(&["optim.lr=abc"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_schedules() {
        let mut cfg = RunConfig::default();
        cfg.optim.decay_epochs = vec![20, 10];
        assert!(cfg.validate().is_err());
        cfg.optim.decay_epochs = vec![10, 30];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[optim]\ndecay_epochs = [2]\nepochs = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optim.epochs, 4);
        assert_eq!(cfg.batch, BatchConfig::default());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }
}
