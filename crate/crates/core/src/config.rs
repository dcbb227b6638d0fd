//! Structured key-value configuration files (TOML) plus resolution into the
//! runtime config types. Every field of the stage, nested, and co-teaching
//! configurations is addressable from the file; command-line flags override
//! file values after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coteach::{CoteachConfig, ForgetSchedule, SelectionForward};
use crate::error::{Error, Result};
use crate::nested::NestedConfig;
use crate::nn::{LrSchedule, SgdConfig};
use crate::pipeline::{AblationSetup, Stage1Config, Stage2Config, ToyConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// one of: none | symmetric | pairflip (train split only)
    pub noise: String,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: 10,
            dim: 32,
            separation: 6.0,
            n_train: 10_000,
            n_val: 2_000,
            n_test: 2_000,
            noise: "symmetric".into(),
            noise_rate: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub feature_width: usize,
    pub batch_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 128,
            feature_width: 128,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedSection {
    pub enabled: bool,
    pub sigma_nest: f64,
}

impl Default for NestedSection {
    fn default() -> Self {
        NestedSection {
            enabled: true,
            sigma_nest: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub decay_epochs: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            epochs: 60,
            batch_size: 128,
            base_lr: 2e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_iters: 234,
            decay_epochs: vec![(40, 0.1)],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<(usize, f64)>,
    pub lambda_forget: f64,
    /// one of: fixed | gradual
    pub schedule: String,
    pub gradual_epochs: usize,
    /// one of: full_channels | sampled_mask
    pub selection_forward: String,
    pub freeze_bn: bool,
    pub seed: u64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            epochs: 30,
            batch_size: 128,
            base_lr: 2e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs: vec![(5, 0.1)],
            lambda_forget: 0.3,
            schedule: "fixed".into(),
            gradual_epochs: 10,
            selection_forward: "full_channels".into(),
            freeze_bn: true,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub noise_std: f64,
    pub hidden: usize,
    pub feature_width: usize,
    pub sigma_nest: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        let d = ToyConfig::default();
        ToySection {
            n: d.n,
            lo: d.lo,
            hi: d.hi,
            noise_std: d.noise_std,
            hidden: d.hidden,
            feature_width: d.feature_width,
            sigma_nest: d.sigma_nest,
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            eval_ks: d.eval_ks,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub include_ce: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            sigmas: vec![25.0, 50.0, 100.0, 150.0, 250.0],
            seeds: vec![0, 1, 2],
            include_ce: true,
        }
    }
}

/// The whole configuration file. Missing sections and fields fall back to
/// defaults; unknown keys are rejected with the TOML location.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub nested: NestedSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub toy: ToySection,
    pub ablate: AblateSection,
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.nested_config()?;
        self.stage1_config()?;
        self.stage2_config()?;
        self.toy_config()?;
        match self.data.noise.as_str() {
            "none" | "symmetric" | "pairflip" => {}
            other => {
                return Err(Error::config(format!(
                    "noise must be none|symmetric|pairflip, got {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn nested_config(&self) -> Result<Option<NestedConfig>> {
        if !self.nested.enabled {
            return Ok(None);
        }
        Ok(Some(NestedConfig::new(
            self.nested.sigma_nest,
            self.model.feature_width,
        )?))
    }

    pub fn stage1_config(&self) -> Result<Stage1Config> {
        let s = &self.stage1;
        let cfg = Stage1Config {
            nested: self.nested_config()?,
            sgd: SgdConfig::new(
                s.momentum,
                s.weight_decay,
                LrSchedule::new(s.base_lr, s.warmup_iters, s.decay_epochs.clone())?,
            )?,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: s.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage2_config(&self) -> Result<Stage2Config> {
        let s = &self.stage2;
        let schedule = match s.schedule.as_str() {
            "fixed" => ForgetSchedule::Fixed,
            "gradual" => ForgetSchedule::Gradual(s.gradual_epochs),
            other => {
                return Err(Error::config(format!(
                    "schedule must be fixed|gradual, got {other:?}"
                )))
            }
        };
        let selection_forward = match s.selection_forward.as_str() {
            "full_channels" => SelectionForward::FullChannels,
            "sampled_mask" => SelectionForward::SampledMask,
            other => {
                return Err(Error::config(format!(
                    "selection_forward must be full_channels|sampled_mask, got {other:?}"
                )))
            }
        };
        let cfg = Stage2Config {
            coteach: CoteachConfig::new(s.lambda_forget, schedule, selection_forward)?,
            nested: self.nested_config()?,
            sgd: SgdConfig::new(
                s.momentum,
                s.weight_decay,
                LrSchedule::new(s.base_lr, 0, s.decay_epochs.clone())?,
            )?,
            epochs: s.epochs,
            batch_size: s.batch_size,
            freeze_bn: s.freeze_bn,
            seed: s.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn toy_config(&self) -> Result<ToyConfig> {
        let t = &self.toy;
        let cfg = ToyConfig {
            n: t.n,
            lo: t.lo,
            hi: t.hi,
            noise_std: t.noise_std,
            hidden: t.hidden,
            feature_width: t.feature_width,
            sigma_nest: t.sigma_nest,
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            eval_ks: t.eval_ks.clone(),
            seed: t.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ablation_setup(&self) -> Result<AblationSetup> {
        Ok(AblationSetup {
            hidden: self.model.hidden,
            feature_width: self.model.feature_width,
            batch_norm: self.model.batch_norm,
            stage1: self.stage1_config()?,
            stage2: self.stage2_config()?,
        })
    }
}
