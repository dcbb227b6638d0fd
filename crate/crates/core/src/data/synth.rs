//! Generators, label-noise injectors, and the stratified split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{NoisyClassificationDataset, RegressionDataset, SplitSpec};
use crate::error::{Error, Result};

/// Evenly spaced inputs over [lo, hi] with additive gaussian target noise;
/// `truth` keeps the noise-free targets.
pub fn gen_toy_regression(
    n: usize,
    lo: f64,
    hi: f64,
    noise_std: f64,
    seed: u64,
) -> Result<RegressionDataset> {
    if n < 2 {
        return Err(Error::config(format!("need n >= 2 points, got {n}")));
    }
    if !(lo < hi) {
        return Err(Error::config(format!("invalid range [{lo}, {hi}]")));
    }
    if noise_std < 0.0 {
        return Err(Error::config("noise_std must be >= 0"));
    }
    let step = (hi - lo) / (n - 1) as f64;
    let x: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = if noise_std == 0.0 {
        x.clone()
    } else {
        x.iter()
            .map(|&v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let truth = x.clone();
    RegressionDataset::new(x, y, truth)
}

/// Draw `classes` mean vectors on the sphere of radius `separation`,
/// rejecting candidates closer than a spacing threshold to any previous
/// mean. The threshold starts at `separation` and halves whenever a mean
/// exhausts its attempt budget, so generation always terminates (and in one
/// dimension the two-class case lands on opposite poles).
fn draw_means(
    classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut threshold = separation;
    while means.len() < classes {
        let mut accepted = false;
        for _ in 0..200 {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|&a| a * a).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            for a in v.iter_mut() {
                *a *= separation / norm;
            }
            let ok = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&v).map(|(&a, &b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= threshold
            });
            if ok {
                means.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            threshold *= 0.5;
        }
    }
    means
}

/// Balanced gaussian blobs: unit-variance isotropic samples around class
/// means on a sphere of radius `separation`. The result is clean
/// (noisy labels equal true labels); class counts differ by at most one.
pub fn gen_gaussian_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<NoisyClassificationDataset> {
    if classes < 2 || n < classes {
        return Err(Error::config(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::config("dim must be >= 1"));
    }
    if !(separation > 0.0) {
        return Err(Error::config(
            "separation must be > 0 (coincident means leave the task undefined)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = draw_means(classes, dim, separation, &mut rng);

    let base = n / classes;
    let extra = n % classes;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        let count = base + usize::from(c < extra);
        for _ in 0..count {
            for &m in mean {
                features.push(m + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    NoisyClassificationDataset::new(features, dim, labels.clone(), labels, classes)
}

/// Flip each label independently with probability `eta` to a uniformly
/// chosen different class. Features are untouched; clean flags recomputed.
pub fn inject_symmetric_noise(
    ds: &NoisyClassificationDataset,
    eta: f64,
    seed: u64,
) -> Result<NoisyClassificationDataset> {
    check_noise_args(ds, eta)?;
    let c = ds.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = ds
        .true_labels()
        .iter()
        .map(|&l| {
            if rng.gen::<f64>() < eta {
                let j = rng.gen_range(0..c - 1);
                if j >= l {
                    j + 1
                } else {
                    j
                }
            } else {
                l
            }
        })
        .collect();
    ds.with_noisy_labels(noisy)
}

/// Flip each label with probability `eta` to the next class modulo the class
/// count (structured noise).
pub fn inject_pairflip_noise(
    ds: &NoisyClassificationDataset,
    eta: f64,
    seed: u64,
) -> Result<NoisyClassificationDataset> {
    check_noise_args(ds, eta)?;
    let c = ds.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = ds
        .true_labels()
        .iter()
        .map(|&l| {
            if rng.gen::<f64>() < eta {
                (l + 1) % c
            } else {
                l
            }
        })
        .collect();
    ds.with_noisy_labels(noisy)
}

fn check_noise_args(ds: &NoisyClassificationDataset, eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::config(format!("noise rate must be in [0,1), got {eta}")));
    }
    if !ds.clean_flags().iter().all(|&f| f) {
        return Err(Error::contract(
            "noise injection requires a clean dataset (all flags true)",
        ));
    }
    Ok(())
}

/// Stratified shuffle-then-partition by true label. Per class, the train and
/// validation splits take the floor of their fractions and the test split the
/// remainder, so class balance holds within one sample per split.
pub fn split(
    ds: &NoisyClassificationDataset,
    spec: &SplitSpec,
) -> Result<(
    NoisyClassificationDataset,
    NoisyClassificationDataset,
    NoisyClassificationDataset,
)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..ds.class_count() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.true_labels()[i] == c).collect();
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_train = (spec.train * m as f64).floor() as usize;
        let n_val = (spec.val * m as f64).floor() as usize;
        train_idx.extend_from_slice(&idx[..n_train]);
        val_idx.extend_from_slice(&idx[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&idx[n_train + n_val..]);
    }
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::config(format!(
            "a split received 0 samples (sizes {}/{}/{})",
            train_idx.len(),
            val_idx.len(),
            test_idx.len()
        )));
    }
    Ok((
        subset(ds, &train_idx)?,
        subset(ds, &val_idx)?,
        subset(ds, &test_idx)?,
    ))
}

fn subset(ds: &NoisyClassificationDataset, indices: &[usize]) -> Result<NoisyClassificationDataset> {
    let mut features = Vec::with_capacity(indices.len() * ds.dim());
    let mut noisy = Vec::with_capacity(indices.len());
    let mut truth = Vec::with_capacity(indices.len());
    for &i in indices {
        features.extend_from_slice(ds.feature_row(i));
        noisy.push(ds.noisy_labels()[i]);
        truth.push(ds.true_labels()[i]);
    }
    NoisyClassificationDataset::new(features, ds.dim(), noisy, truth, ds.class_count())
}
