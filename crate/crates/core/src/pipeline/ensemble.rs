//! Two-peer prediction averaging.

use crate::autodiff::softmax_rows;
use crate::data::NoisyClassificationDataset;
use crate::error::{Error, Result};
use crate::nested::argmax;
use crate::nn::Mlp;

/// Class probabilities of the ensembled model: the arithmetic mean of the
/// two peers' softmax outputs, each evaluated with its own truncation depth
/// (`None` = full channels). Returns a row-major [n x C] table.
pub fn ensemble_predict(
    model1: &Mlp,
    model2: &Mlp,
    features: &[f64],
    n: usize,
    k1: Option<usize>,
    k2: Option<usize>,
) -> Result<Vec<f64>> {
    let c1 = model1.output_dim();
    let c2 = model2.output_dim();
    if c1 != c2 {
        return Err(Error::ShapeMismatch {
            op: "ensemble_predict",
            lhs: vec![c1],
            rhs: vec![c2],
        });
    }
    let logits1 = model1.logits(features, n, k1)?;
    let logits2 = model2.logits(features, n, k2)?;
    let p1 = softmax_rows(&logits1, n, c1);
    let p2 = softmax_rows(&logits2, n, c1);
    Ok(p1
        .iter()
        .zip(&p2)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect())
}

/// Ensemble accuracy against true labels.
pub fn ensemble_accuracy(
    model1: &Mlp,
    model2: &Mlp,
    ds: &NoisyClassificationDataset,
    k1: Option<usize>,
    k2: Option<usize>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("ensemble evaluation on an empty dataset"));
    }
    let probs = ensemble_predict(model1, model2, ds.features(), ds.len(), k1, k2)?;
    let c = model1.output_dim();
    let correct = ds
        .true_labels()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(&probs[i * c..(i + 1) * c]) == label)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}
