//! Synthetic datasets: the noisy toy regression and gaussian-blob
//! classification with injected label noise, plus splits and CSV round-trip.

mod io;
mod synth;

pub use io::{
    fmt_f64_17, load_classification_csv, load_regression_csv, save_classification_csv,
    save_regression_csv,
};
pub use synth::{
    gen_gaussian_blobs, gen_toy_regression, inject_pairflip_noise, inject_symmetric_noise, split,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Noisy 1-d regression set. `truth` holds the noise-free targets and is used
/// for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    x: Vec<f64>,
    y: Vec<f64>,
    truth: Vec<f64>,
}

impl RegressionDataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, truth: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != truth.len() {
            return Err(Error::contract(format!(
                "regression arrays disagree: x={}, y={}, truth={}",
                x.len(),
                y.len(),
                truth.len()
            )));
        }
        if x.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("regression inputs must be sorted ascending"));
        }
        Ok(RegressionDataset { x, y, truth })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    /// Inputs as an [n x 1] feature matrix.
    pub fn inputs_tensor(&self) -> Tensor {
        Tensor::matrix(self.x.len(), 1, self.x.clone()).expect("n x 1 inputs")
    }
}

/// Classification set carrying both noisy and true labels. Training reads
/// `noisy_labels`; true labels and clean flags exist for evaluation and
/// selection-purity metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClassificationDataset {
    features: Vec<f64>,
    dim: usize,
    noisy_labels: Vec<usize>,
    true_labels: Vec<usize>,
    clean_flags: Vec<bool>,
    class_count: usize,
}

impl NoisyClassificationDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        noisy_labels: Vec<usize>,
        true_labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let n = noisy_labels.len();
        if dim == 0 || class_count < 2 {
            return Err(Error::config(format!(
                "need dim >= 1 and classes >= 2, got dim={dim}, classes={class_count}"
            )));
        }
        if features.len() != n * dim || true_labels.len() != n {
            return Err(Error::contract(format!(
                "dataset arrays disagree: {} features for {} samples of dim {}",
                features.len(),
                n,
                dim
            )));
        }
        for &l in noisy_labels.iter().chain(&true_labels) {
            if l >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: class_count,
                });
            }
        }
        let clean_flags: Vec<bool> = noisy_labels
            .iter()
            .zip(&true_labels)
            .map(|(a, b)| a == b)
            .collect();
        Ok(NoisyClassificationDataset {
            features,
            dim,
            noisy_labels,
            true_labels,
            clean_flags,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn clean_flags(&self) -> &[bool] {
        &self.clean_flags
    }

    pub fn clean_fraction(&self) -> f64 {
        self.clean_flags.iter().filter(|&&f| f).count() as f64 / self.len().max(1) as f64
    }

    /// Gather the given sample indices into a feature matrix plus noisy and
    /// clean-flag views, preserving index order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<bool>)> {
        let mut feats = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut flags = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "gather index {i} out of range for {} samples",
                    self.len()
                )));
            }
            feats.extend_from_slice(self.feature_row(i));
            labels.push(self.noisy_labels[i]);
            flags.push(self.clean_flags[i]);
        }
        Ok((Tensor::matrix(indices.len(), self.dim, feats)?, labels, flags))
    }

    /// Replace the noisy labels (noise injectors only); flags are recomputed.
    pub(crate) fn with_noisy_labels(&self, noisy_labels: Vec<usize>) -> Result<Self> {
        NoisyClassificationDataset::new(
            self.features.clone(),
            self.dim,
            noisy_labels,
            self.true_labels.clone(),
            self.class_count,
        )
    }
}

/// Train/validation/test fractions plus a shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec {
            train,
            val,
            test,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Fractions derived from absolute counts.
    pub fn from_counts(train: usize, val: usize, test: usize, seed: u64) -> Result<Self> {
        let n = (train + val + test) as f64;
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::config("every split must receive at least one sample"));
        }
        SplitSpec::new(train as f64 / n, val as f64 / n, test as f64 / n, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0) {
            return Err(Error::config("split fractions must be positive"));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}
