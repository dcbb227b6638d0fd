//! The noisy-regression demonstration: a plain MLP against the same MLP with
//! nested masking, with predictions read out at a handful of truncation
//! depths.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{gen_toy_regression, RegressionDataset};
use crate::error::{Error, Result};
use crate::nested::{k_distribution, mse_of, sample_k, NestedConfig};
use crate::nn::{train_step_mse, Mlp, SgdState, StepAt};
use crate::pipeline::build_regression_mlp;
use crate::seeds::{derive_seed, stream_rng, STREAM_INIT, STREAM_MASK_A};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
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
    /// Truncation depths to read out after training the masked model.
    pub eval_ks: Vec<usize>,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n: 64,
            lo: 0.0,
            hi: 10.0,
            noise_std: 1.0,
            hidden: 64,
            feature_width: 128,
            sigma_nest: 200.0,
            epochs: 100_000,
            lr: 1e-3,
            momentum: 0.9,
            eval_ks: vec![1, 10, 100],
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("toy experiment needs epochs >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("toy learning rate must be > 0"));
        }
        NestedConfig::new(self.sigma_nest, self.feature_width)?;
        for &k in &self.eval_ks {
            if k == 0 || k > self.feature_width {
                return Err(Error::config(format!(
                    "eval k={k} out of range [1, {}]",
                    self.feature_width
                )));
            }
        }
        Ok(())
    }
}

/// One prediction curve with its mean squared error against the noise-free
/// targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyCurve {
    pub label: String,
    /// Truncation depth used at readout; `None` for the plain model.
    pub k: Option<usize>,
    pub predictions: Vec<f64>,
    pub mse_to_truth: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyOutcome {
    pub config: ToyConfig,
    #[serde(skip)]
    pub dataset: RegressionDataset,
    pub curves: Vec<ToyCurve>,
    pub plain_final_loss: f64,
    pub nested_final_loss: f64,
}

impl ToyOutcome {
    pub fn curve(&self, k: Option<usize>) -> Option<&ToyCurve> {
        self.curves.iter().find(|c| c.k == k)
    }
}

/// The dataset a toy run with this config trains on.
pub fn toy_dataset(cfg: &ToyConfig) -> Result<RegressionDataset> {
    gen_toy_regression(
        cfg.n,
        cfg.lo,
        cfg.hi,
        cfg.noise_std,
        derive_seed(cfg.seed, 0x0da7a),
    )
}

/// Train one toy model to completion: the plain variant when `masked` is
/// false, the channel-masked variant otherwise. Both variants share the same
/// initial weights for a given config seed; only the per-iteration masking
/// differs. Returns the model and its final training loss.
pub fn train_toy_model(cfg: &ToyConfig, masked: bool) -> Result<(Mlp, f64)> {
    cfg.validate()?;
    let ds = toy_dataset(cfg)?;
    let x = ds.inputs_tensor();
    let y = Tensor::vector(ds.y().to_vec());
    let mut init_rng = stream_rng(derive_seed(cfg.seed, 0x1217), STREAM_INIT);
    let mut model = build_regression_mlp(cfg.hidden, cfg.feature_width, &mut init_rng);

    let dist = if masked {
        Some(k_distribution(&NestedConfig::new(
            cfg.sigma_nest,
            cfg.feature_width,
        )?)?)
    } else {
        None
    };
    let mut mask_rng = stream_rng(derive_seed(cfg.seed, 0x3a5c), STREAM_MASK_A);
    let mut opt = SgdState::for_model(&model);
    let mut last = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let k = dist.as_ref().map(|d| sample_k(d, &mut mask_rng));
        last = train_step_mse(
            &mut model,
            &mut opt,
            cfg.momentum,
            0.0,
            cfg.lr,
            &x,
            &y,
            k,
            StepAt { epoch, iter: epoch },
        )?;
    }
    Ok((model, last))
}

/// Train the plain and masked models on one sampled dataset and read out the
/// prediction table.
pub fn run_toy_experiment(cfg: &ToyConfig) -> Result<ToyOutcome> {
    cfg.validate()?;
    let ds = toy_dataset(cfg)?;
    let (plain, plain_final_loss) = train_toy_model(cfg, false)?;
    let (nested_model, nested_final_loss) = train_toy_model(cfg, true)?;

    let mut curves = Vec::new();
    let plain_preds = plain.logits(ds.x(), ds.len(), None)?;
    curves.push(ToyCurve {
        label: "plain".to_string(),
        k: None,
        mse_to_truth: mse_of(&plain_preds, ds.truth()),
        predictions: plain_preds,
    });
    for &k in &cfg.eval_ks {
        let preds = nested_model.logits(ds.x(), ds.len(), Some(k))?;
        curves.push(ToyCurve {
            label: format!("nested k={k}"),
            k: Some(k),
            mse_to_truth: mse_of(&preds, ds.truth()),
            predictions: preds,
        });
    }

    Ok(ToyOutcome {
        config: cfg.clone(),
        dataset: ds,
        curves,
        plain_final_loss,
        nested_final_loss,
    })
}
