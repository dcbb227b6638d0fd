//! Two-stage training pipeline: independent pretraining with nested masking,
//! then co-teaching fine-tuning, plus the toy regression experiment and the
//! sigma ablation harness.

mod ablate;
mod ensemble;
mod toy;
mod train;

pub use ablate::{ablation_csv, run_ablation, run_cell, AblationRow, AblationSetup, CellResult};
pub use ensemble::{ensemble_accuracy, ensemble_predict};
pub use toy::{run_toy_experiment, toy_dataset, train_toy_model, ToyConfig, ToyCurve, ToyOutcome};
pub use train::{train_stage1, train_stage2, SplitData};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coteach::CoteachConfig;
use crate::error::{Error, Result};
use crate::nested::NestedConfig;
use crate::nn::{BatchNorm1d, Layer, Linear, Mlp, SgdConfig};

/// Stage-one pretraining configuration. `nested: None` is the plain
/// cross-entropy baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub nested: Option<NestedConfig>,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if let Some(n) = &self.nested {
            n.validate()?;
        }
        self.sgd.validate()
    }
}

/// Stage-two fine-tuning configuration. Warm-up is structurally zero here;
/// batch norm freezes by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub coteach: CoteachConfig,
    /// Nested masking carried into the fine-tune update passes; `None` for
    /// the plain co-teaching baseline.
    pub nested: Option<NestedConfig>,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_bn: bool,
    pub seed: u64,
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.sgd.schedule.warmup_iters != 0 {
            return Err(Error::config(
                "stage two applies no warm-up (warmup_iters must be 0)",
            ));
        }
        if let Some(n) = &self.nested {
            n.validate()?;
        }
        self.coteach.validate()?;
        self.sgd.validate()
    }
}

/// The regression architecture: 1 -> hidden -> feature -> 1 with relu after
/// each hidden linear and the nested position on the feature activation.
pub fn build_regression_mlp(hidden: usize, feature: usize, rng: &mut impl Rng) -> Mlp {
    Mlp::new(
        vec![
            Layer::Linear(Linear::new(1, hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(hidden, feature, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(feature, 1, rng)),
        ],
        [3],
    )
    .expect("regression architecture chains")
}

/// The synthetic classifier: dim -> hidden -> feature -> classes, with
/// optional batch norm after each hidden linear and the nested position on
/// the feature activation (right before the classifier).
pub fn build_classifier_mlp(
    dim: usize,
    hidden: usize,
    feature: usize,
    classes: usize,
    batch_norm: bool,
    rng: &mut impl Rng,
) -> Mlp {
    let mut layers = vec![Layer::Linear(Linear::new(dim, hidden, rng))];
    if batch_norm {
        layers.push(Layer::BatchNorm(BatchNorm1d::new(hidden)));
    }
    layers.push(Layer::Relu);
    layers.push(Layer::Linear(Linear::new(hidden, feature, rng)));
    if batch_norm {
        layers.push(Layer::BatchNorm(BatchNorm1d::new(feature)));
    }
    layers.push(Layer::Relu);
    let nested_pos = layers.len() - 1;
    layers.push(Layer::Linear(Linear::new(feature, classes, rng)));
    Mlp::new(layers, [nested_pos]).expect("classifier architecture chains")
}
