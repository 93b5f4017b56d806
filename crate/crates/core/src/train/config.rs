//! Experiment configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ViewMode};

/// Components removed for an ablation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop the contrastive term from the objective. The memory bank still
    /// updates because the gate reads its class centres.
    pub no_cmcl: bool,
    /// Replace the attention cascade by pooled last-stage features.
    pub no_dsam: bool,
    /// Use one expert and no gate.
    pub no_moe: bool,
    pub view: ViewMode,
}

impl Ablation {
    /// Short run label, e.g. `full`, `no_cmcl`, `long`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_cmcl {
            parts.push("no_cmcl");
        }
        if self.no_dsam {
            parts.push("no_dsam");
        }
        if self.no_moe {
            parts.push("no_moe");
        }
        if self.view != ViewMode::Both {
            parts.push(self.view.name());
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    /// The six rows of the ablation grid, full model first.
    pub fn grid() -> Vec<Ablation> {
        let base = Ablation::default();
        vec![
            base.clone(),
            Ablation { no_cmcl: true, ..base.clone() },
            Ablation { no_dsam: true, ..base.clone() },
            Ablation { no_moe: true, ..base.clone() },
            Ablation { view: ViewMode::Long, ..base.clone() },
            Ablation { view: ViewMode::Trans, ..base },
        ]
    }
}

/// Which validation statistic picks the kept checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    ValMF1,
    ValAcc,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the old memory row in the moving average.
    pub alpha: f64,
    pub tau: f64,
    /// Weight of the contrastive term in the objective.
    pub lambda: f64,
    /// Train/val/test proportions.
    pub split: [f64; 3],
    pub selection: Selection,
    pub eval_batch_size: usize,
    pub ablation: Ablation,
    pub data: GenSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small CPU-friendly setting: 600 synthetic pairs at 32×32, 30 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            alpha: 0.01,
            tau: 0.01,
            lambda: 0.2,
            split: [7.0, 1.0, 2.0],
            selection: Selection::ValMF1,
            eval_batch_size: 64,
            ablation: Ablation::default(),
            data: GenSpec::default(),
            model: ModelConfig::default(),
        }
    }

    /// Published training schedule and cohort size on 224×224 inputs.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-4,
            data: GenSpec {
                n: 1657,
                image_size: 224,
                ..GenSpec::default()
            },
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {} out of range", self.lr, self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be > 0", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        let multiple = if self.ablation.no_dsam { 16 } else { 32 };
        if self.data.image_size % multiple != 0 {
            return bad(format!("image_size {} must be a multiple of {multiple}", self.data.image_size));
        }
        self.data.validate()
    }

    /// Effective contrastive weight after ablation.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_cmcl {
            0.0
        } else {
            self.lambda
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation.view = ViewMode::Trans;
        cfg.seed = 9;
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml("epochs = 3\nlearning_rate = 0.1\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nwidth = 3\n").is_err());
        let cfg = TrainConfig::from_toml("epochs = 3\n[ablation]\nno_moe = true\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.ablation.no_moe);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(TrainConfig::from_toml("tau = 0.0").is_err());
        assert!(TrainConfig::from_toml("alpha = 1.5").is_err());
        assert!(TrainConfig::from_toml("lambda = -1.0").is_err());
    }

    #[test]
    fn grid_labels() {
        let labels: Vec<String> = Ablation::grid().iter().map(Ablation::label).collect();
        assert_eq!(labels, ["full", "no_cmcl", "no_dsam", "no_moe", "long", "trans"]);
    }
}
