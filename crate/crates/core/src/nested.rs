//! Nested channel masking: the truncated-gaussian index distribution, the
//! prefix mask with gated gradients, truncated inference, and the optimal
//! channel search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{NoisyClassificationDataset, RegressionDataset};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use rand::Rng;

/// Channel count K of the regularized representation plus the scale of the
/// index distribution. Smaller `sigma_nest` concentrates training on the
/// earliest channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedConfig {
    pub sigma_nest: f64,
    pub channels: usize,
}

impl NestedConfig {
    pub fn new(sigma_nest: f64, channels: usize) -> Result<Self> {
        let cfg = NestedConfig {
            sigma_nest,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_nest > 0.0) || !self.sigma_nest.is_finite() {
            return Err(Error::config(format!(
                "sigma_nest must be positive and finite, got {}",
                self.sigma_nest
            )));
        }
        if self.channels < 1 {
            return Err(Error::config("channel count K must be >= 1"));
        }
        Ok(())
    }
}

/// Normalized truncated categorical over k = 1..K with
/// p_k proportional to exp(-k^2 / (2 sigma^2)).
#[derive(Debug, Clone, PartialEq)]
pub struct KDistribution {
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl KDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channels(&self) -> usize {
        self.probs.len()
    }

    /// Inverse-CDF draw of k in [1, K]; reproducible given the rng seed.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u) + 1
    }
}

/// Evaluate the index distribution. Exponents are shifted by their maximum
/// (the k = 1 term) before exponentiation, so very small sigmas cannot
/// underflow the whole mass away.
pub fn k_distribution(config: &NestedConfig) -> Result<KDistribution> {
    config.validate()?;
    let k = config.channels;
    let denom = 2.0 * config.sigma_nest * config.sigma_nest;
    let exponents: Vec<f64> = (1..=k).map(|i| -((i * i) as f64) / denom).collect();
    let max = exponents[0];
    let weights: Vec<f64> = exponents.iter().map(|&e| (e - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|&w| w / total).collect();
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cdf.push(acc);
    }
    // Guard the final bucket against accumulated rounding.
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    Ok(KDistribution { probs, cdf })
}

/// Draw the channel count for one training iteration.
pub fn sample_k(dist: &KDistribution, rng: &mut impl Rng) -> usize {
    dist.sample(rng)
}

/// Keep the first `k` channels of `h` and mask the rest to zeros. The
/// backward pass passes zero gradient into masked channels and identity into
/// kept ones. For matrices the mask applies per row along the feature axis.
pub fn apply_nested_mask(tape: &mut Tape, h: Var, k: usize) -> Result<Var> {
    tape.prefix_mask(h, k)
}

/// Deterministic truncated evaluation of a classifier: accuracy against the
/// true labels with the mask fixed at `k` (no sampling). Ties in the argmax
/// resolve toward the smaller class index.
pub fn truncate_eval_classification(
    model: &Mlp,
    ds: &NoisyClassificationDataset,
    k: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("truncate_eval on an empty dataset"));
    }
    accuracy_at(model, ds, Some(k))
}

/// Truncated evaluation of a regression model: MSE of the masked predictions
/// against the provided targets.
pub fn truncate_eval_regression(
    model: &Mlp,
    ds: &RegressionDataset,
    targets: &[f64],
    k: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("truncate_eval on an empty dataset"));
    }
    if targets.len() != ds.len() {
        return Err(Error::ShapeMismatch {
            op: "truncate_eval_regression",
            lhs: vec![ds.len()],
            rhs: vec![targets.len()],
        });
    }
    let preds = model.logits(ds.x(), ds.len(), Some(k))?;
    Ok(mse_of(&preds, targets))
}

pub(crate) fn mse_of(preds: &[f64], targets: &[f64]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / targets.len() as f64
}

/// Accuracy of `model` on `ds` against the true labels, optionally truncated.
pub fn accuracy_at(model: &Mlp, ds: &NoisyClassificationDataset, k: Option<usize>) -> Result<f64> {
    let logits = model.logits(ds.features(), ds.len(), k)?;
    let c = model.output_dim();
    let correct = ds
        .true_labels()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(&logits[i * c..(i + 1) * c]) == label)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Validation accuracy for every truncation depth k = 1..K.
pub fn sweep_truncation(
    model: &Mlp,
    ds: &NoisyClassificationDataset,
) -> Result<Vec<(usize, f64)>> {
    let width = model
        .nested_width()
        .ok_or_else(|| Error::contract("model has no registered nested position"))?;
    if ds.is_empty() {
        return Err(Error::contract("truncation sweep on an empty dataset"));
    }
    // Each k is evaluated independently over the immutable model; results are
    // merged in k order so the table is deterministic.
    (1..=width)
        .into_par_iter()
        .map(|k| truncate_eval_classification(model, ds, k).map(|acc| (k, acc)))
        .collect()
}

/// Smallest truncation depth maximizing validation accuracy
/// (ties break toward smaller k, favoring compression).
pub fn find_optimal_k(model: &Mlp, val: &NoisyClassificationDataset) -> Result<(usize, f64)> {
    let table = sweep_truncation(model, val)?;
    let mut best = table[0];
    for &(k, acc) in &table[1..] {
        if acc > best.1 {
            best = (k, acc);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::{Layer, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k1_distribution_is_point_mass() {
        let d = k_distribution(&NestedConfig::new(5.0, 1).unwrap()).unwrap();
        assert_eq!(d.probs(), &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(d.sample(&mut rng), 1);
        }
    }

    #[test]
    fn k2_sigma1_matches_direct_evaluation() {
        // exp(-0.5) and exp(-2), normalized.
        let d = k_distribution(&NestedConfig::new(1.0, 2).unwrap()).unwrap();
        let e1 = (-0.5f64).exp();
        let e2 = (-2.0f64).exp();
        let z = e1 + e2;
        assert!((d.probs()[0] - e1 / z).abs() < 1e-15);
        assert!((d.probs()[1] - e2 / z).abs() < 1e-15);
        assert!((d.probs()[0] - 0.8176).abs() < 1e-4);
        assert!((d.probs()[1] - 0.1824).abs() < 1e-4);
    }

    #[test]
    fn huge_sigma_limit_is_uniform() {
        let d = k_distribution(&NestedConfig::new(1e9, 3).unwrap()).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn probs_strictly_decreasing_and_normalized() {
        // K is scaled with sigma so the smallest weight stays above f64
        // underflow; strict decrease is vacuous once exp(-k^2/2s^2) rounds
        // to zero.
        for (sigma, channels) in [(1.0, 16), (5.0, 64), (25.0, 128), (200.0, 128), (1e4, 128)] {
            let d = k_distribution(&NestedConfig::new(sigma, channels).unwrap()).unwrap();
            let sum: f64 = d.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
            for w in d.probs().windows(2) {
                assert!(w[0] > w[1], "sigma {sigma}: not strictly decreasing");
            }
        }
    }

    #[test]
    fn tiny_sigma_concentrates_on_first_channel() {
        let d = k_distribution(&NestedConfig::new(0.05, 64).unwrap()).unwrap();
        assert!(d.probs()[0] > 1.0 - 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(d.sample(&mut rng), 1);
    }

    #[test]
    fn p1_nonincreasing_in_sigma() {
        let mut prev = f64::INFINITY;
        for sigma in [1.0, 5.0, 25.0, 50.0, 100.0, 250.0] {
            let d = k_distribution(&NestedConfig::new(sigma, 128).unwrap()).unwrap();
            assert!(d.probs()[0] <= prev + 1e-15);
            prev = d.probs()[0];
        }
    }

    #[test]
    fn degenerate_distribution_always_samples_its_atom() {
        let d = KDistribution {
            probs: vec![0.0, 1.0],
            cdf: vec![0.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(sample_k(&d, &mut rng), 2);
        }
    }

    #[test]
    fn sampling_is_bitwise_reproducible() {
        let d = k_distribution(&NestedConfig::new(25.0, 128).unwrap()).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn mask_keeps_prefix_and_zeroes_rest() {
        let mut tape = Tape::new();
        let h = tape.leaf(&Tensor::vector(vec![3.0, 1.0, 4.0, 1.0, 5.0]));
        let z = apply_nested_mask(&mut tape, h, 2).unwrap();
        assert_eq!(tape.value(z), &[3.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_at_full_width_is_identity() {
        let mut tape = Tape::new();
        let h = tape.leaf(&Tensor::vector(vec![3.0, -1.0, 4.5]));
        let z = apply_nested_mask(&mut tape, h, 3).unwrap();
        assert_eq!(tape.value(z), &[3.0, -1.0, 4.5]);
    }

    #[test]
    fn mask_gradient_gates_channels() {
        let mut tape = Tape::new();
        let h = tape.leaf(&Tensor::vector(vec![1.0; 5]).with_grad());
        let z = apply_nested_mask(&mut tape, h, 2).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(h).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_out_of_range_is_error() {
        let mut tape = Tape::new();
        let h = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        assert!(apply_nested_mask(&mut tape, h, 0).is_err());
        assert!(apply_nested_mask(&mut tape, h, 3).is_err());
    }

    fn constant_output_model() -> Mlp {
        // Zero weights: output equals the bias regardless of input or mask.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin1 = Linear::new(2, 4, &mut rng);
        let mut lin2 = Linear::new(4, 3, &mut rng);
        for w in lin1.weight.data_mut() {
            *w = 0.0;
        }
        for w in lin2.weight.data_mut() {
            *w = 0.0;
        }
        lin2.bias.data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
        Mlp::new(
            vec![Layer::Linear(lin1), Layer::Relu, Layer::Linear(lin2)],
            [1],
        )
        .unwrap()
    }

    #[test]
    fn find_optimal_k_tie_breaks_toward_smallest() {
        let model = constant_output_model();
        let ds = crate::data::gen_gaussian_blobs(60, 3, 2, 5.0, 4).unwrap();
        let (kstar, _) = find_optimal_k(&model, &ds).unwrap();
        assert_eq!(kstar, 1);
    }

    #[test]
    fn sweep_covers_all_depths_in_order() {
        let model = constant_output_model();
        let ds = crate::data::gen_gaussian_blobs(30, 3, 2, 5.0, 4).unwrap();
        let table = sweep_truncation(&model, &ds).unwrap();
        assert_eq!(table.len(), 4);
        for (i, &(k, _)) in table.iter().enumerate() {
            assert_eq!(k, i + 1);
        }
    }

    #[test]
    fn truncate_eval_full_width_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Mlp::new(
            vec![
                Layer::Linear(Linear::new(2, 6, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::new(6, 3, &mut rng)),
            ],
            [1],
        )
        .unwrap();
        let ds = crate::data::gen_gaussian_blobs(90, 3, 2, 6.0, 5).unwrap();
        let masked = truncate_eval_classification(&model, &ds, 6).unwrap();
        let unmasked = accuracy_at(&model, &ds, None).unwrap();
        assert_eq!(masked, unmasked);
    }

    #[test]
    fn evaluation_invariant_to_dataset_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Mlp::new(
            vec![
                Layer::Linear(Linear::new(2, 6, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::new(6, 3, &mut rng)),
            ],
            [1],
        )
        .unwrap();
        let ds = crate::data::gen_gaussian_blobs(91, 3, 2, 6.0, 7).unwrap();
        // Reverse the sample order via gather.
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let (feats, _, _) = ds.gather(&rev).unwrap();
        let noisy: Vec<usize> = rev.iter().map(|&i| ds.noisy_labels()[i]).collect();
        let truth: Vec<usize> = rev.iter().map(|&i| ds.true_labels()[i]).collect();
        let reversed = NoisyClassificationDataset::new(
            feats.data().to_vec(),
            ds.dim(),
            noisy,
            truth,
            ds.class_count(),
        )
        .unwrap();
        let a = truncate_eval_classification(&model, &ds, 3).unwrap();
        let b = truncate_eval_classification(&model, &reversed, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = constant_output_model();
        let empty =
            NoisyClassificationDataset::new(Vec::new(), 2, Vec::new(), Vec::new(), 3).unwrap();
        assert!(truncate_eval_classification(&model, &empty, 1).is_err());
        assert!(find_optimal_k(&model, &empty).is_err());
    }
}
