//! Acceptance suite. One test per criterion; each prints a PASS line with
//! the measured numbers. Heavy experiments are computed once in a shared
//! harness and reused across criteria; every run is seeded and bitwise
//! reproducible.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use noiselab::autodiff::{grad_check, Tape, Tensor, Var};
use noiselab::config::FileConfig;
use noiselab::coteach::{keep_fraction_at, CoteachConfig, ForgetSchedule, SelectionForward};
use noiselab::data::{gen_gaussian_blobs, inject_symmetric_noise, split, SplitSpec};
use noiselab::error::Result;
use noiselab::metrics::RunMetrics;
use noiselab::nested::{
    accuracy_at, find_optimal_k, k_distribution, sample_k, sweep_truncation, NestedConfig,
};
use noiselab::nn::{freeze_batchnorm, Layer, LrSchedule, Mlp};
use noiselab::pipeline::{
    build_classifier_mlp, ensemble_accuracy, toy_dataset, train_stage1, train_stage2,
    train_toy_model, SplitData, Stage1Config, Stage2Config, ToyConfig,
};
use noiselab::seeds::{derive_seed, stream_rng, STREAM_INIT};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SIGMAS: [f64; 5] = [25.0, 50.0, 100.0, 150.0, 250.0];
const FEATURE_WIDTH: usize = 128;

// ---------------------------------------------------------------------------
// Shared harness
// ---------------------------------------------------------------------------

struct ToyOutcomeRow {
    seed: u64,
    plain_mse: f64,
    k10_mse: f64,
    k100_mse: f64,
}

struct SeedOutcome {
    seed: u64,
    ce_acc: f64,
    nested_acc: f64,
    ensemble_acc: f64,
    kstars: (usize, usize),
    stage2_metrics: RunMetrics,
}

struct SigmaOutcome {
    sigma: f64,
    kstar: usize,
    acc_at_kstar: f64,
    acc_at_full: f64,
}

struct Harness {
    toy: Vec<ToyOutcomeRow>,
    toy_seconds: f64,
    seeds: Vec<SeedOutcome>,
    sigma_rows: Vec<SigmaOutcome>,
    ce_val_sweep: Vec<(usize, f64)>,
    synth_seconds: f64,
    sigma_seconds: f64,
}

fn default_splits() -> SplitData {
    let cfg = FileConfig::default();
    let d = &cfg.data;
    let n = d.n_train + d.n_val + d.n_test;
    let clean =
        gen_gaussian_blobs(n, d.classes, d.dim, d.separation, derive_seed(d.seed, 0)).unwrap();
    let spec =
        SplitSpec::from_counts(d.n_train, d.n_val, d.n_test, derive_seed(d.seed, 1)).unwrap();
    let (train, val, test) = split(&clean, &spec).unwrap();
    let train = inject_symmetric_noise(&train, d.noise_rate, derive_seed(d.seed, 2)).unwrap();
    SplitData { train, val, test }
}

fn stage1_for(seed: u64, sigma: Option<f64>) -> Stage1Config {
    let cfg = FileConfig::default();
    let mut stage1 = cfg.stage1_config().unwrap();
    stage1.seed = seed;
    stage1.nested = sigma.map(|s| NestedConfig::new(s, FEATURE_WIDTH).unwrap());
    stage1
}

fn stage2_for(seed: u64, sigma: Option<f64>) -> Stage2Config {
    let cfg = FileConfig::default();
    let mut stage2 = cfg.stage2_config().unwrap();
    stage2.seed = seed;
    stage2.nested = sigma.map(|s| NestedConfig::new(s, FEATURE_WIDTH).unwrap());
    stage2
}

fn train_one(data: &SplitData, seed: u64, sigma: Option<f64>) -> Result<Mlp> {
    let file = FileConfig::default();
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut model = build_classifier_mlp(
        data.train.dim(),
        file.model.hidden,
        FEATURE_WIDTH,
        data.train.class_count(),
        file.model.batch_norm,
        &mut rng,
    );
    train_stage1(&mut model, &data.train, None, None, &stage1_for(seed, sigma))?;
    Ok(model)
}

fn harness() -> &'static Harness {
    static HARNESS: OnceLock<Harness> = OnceLock::new();
    HARNESS.get_or_init(|| {
        // Phase 1: toy regression, ten independent training runs. Masked
        // runs cost more, so they go first for better two-worker packing.
        let toy_started = Instant::now();
        let tasks: Vec<(u64, bool)> = SEEDS
            .iter()
            .map(|&s| (s, true))
            .chain(SEEDS.iter().map(|&s| (s, false)))
            .collect();
        let models: Vec<((u64, bool), Mlp)> = tasks
            .par_iter()
            .map(|&(seed, masked)| {
                let cfg = ToyConfig { seed, ..ToyConfig::default() };
                let (model, _) = train_toy_model(&cfg, masked).unwrap();
                ((seed, masked), model)
            })
            .collect();
        let toy = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = ToyConfig { seed, ..ToyConfig::default() };
                let ds = toy_dataset(&cfg).unwrap();
                let model_of = |masked: bool| {
                    &models
                        .iter()
                        .find(|((s, m), _)| *s == seed && *m == masked)
                        .unwrap()
                        .1
                };
                let mse_at = |model: &Mlp, k: Option<usize>| {
                    let preds = model.logits(ds.x(), ds.len(), k).unwrap();
                    preds
                        .iter()
                        .zip(ds.truth())
                        .map(|(&p, &t)| (p - t) * (p - t))
                        .sum::<f64>()
                        / ds.len() as f64
                };
                ToyOutcomeRow {
                    seed,
                    plain_mse: mse_at(model_of(false), None),
                    k10_mse: mse_at(model_of(true), Some(10)),
                    k100_mse: mse_at(model_of(true), Some(100)),
                }
            })
            .collect();
        let toy_seconds = toy_started.elapsed().as_secs_f64();

        // Phase 2: the synthetic noisy classification pipeline, five seeds.
        let synth_started = Instant::now();
        let data = default_splits();
        let sigma = FileConfig::default().nested.sigma_nest;

        #[derive(Clone, Copy)]
        enum Role {
            Ce,
            PeerA,
            PeerB,
        }
        let stage1_tasks: Vec<(u64, Role)> = SEEDS
            .iter()
            .flat_map(|&s| [(s, Role::Ce), (s, Role::PeerA), (s, Role::PeerB)])
            .collect();
        let trained: Vec<Mlp> = stage1_tasks
            .par_iter()
            .map(|&(seed, role)| match role {
                Role::Ce => train_one(&data, derive_seed(seed, 100), None).unwrap(),
                Role::PeerA => train_one(&data, derive_seed(seed, 0), Some(sigma)).unwrap(),
                Role::PeerB => train_one(&data, derive_seed(seed, 1), Some(sigma)).unwrap(),
            })
            .collect();
        let ce_val_sweep = sweep_truncation(&trained[0], &data.val).unwrap();

        let seeds: Vec<SeedOutcome> = SEEDS
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let ce = &trained[3 * i];
                let mut m1 = trained[3 * i + 1].clone();
                let mut m2 = trained[3 * i + 2].clone();
                let ce_acc = accuracy_at(ce, &data.test, None).unwrap();
                let (k1, _) = find_optimal_k(&m1, &data.val).unwrap();
                let (k2, _) = find_optimal_k(&m2, &data.val).unwrap();
                let nested_acc = 0.5
                    * (accuracy_at(&m1, &data.test, Some(k1)).unwrap()
                        + accuracy_at(&m2, &data.test, Some(k2)).unwrap());
                let stage2_metrics = train_stage2(
                    &mut m1,
                    &mut m2,
                    &data.train,
                    None,
                    None,
                    &stage2_for(derive_seed(seed, 2), Some(sigma)),
                )
                .unwrap();
                let (fk1, _) = find_optimal_k(&m1, &data.val).unwrap();
                let (fk2, _) = find_optimal_k(&m2, &data.val).unwrap();
                let ensemble_acc =
                    ensemble_accuracy(&m1, &m2, &data.test, Some(fk1), Some(fk2)).unwrap();
                SeedOutcome {
                    seed,
                    ce_acc,
                    nested_acc,
                    ensemble_acc,
                    kstars: (fk1, fk2),
                    stage2_metrics,
                }
            })
            .collect();
        let synth_seconds = synth_started.elapsed().as_secs_f64();

        // Phase 3: one pretrained model per sigma for the compression rows.
        let sigma_started = Instant::now();
        let sigma_rows: Vec<SigmaOutcome> = SIGMAS
            .par_iter()
            .map(|&sigma| {
                let seed = derive_seed(9000 + sigma as u64, 0);
                let model = train_one(&data, seed, Some(sigma)).unwrap();
                let (kstar, _) = find_optimal_k(&model, &data.val).unwrap();
                SigmaOutcome {
                    sigma,
                    kstar,
                    acc_at_kstar: accuracy_at(&model, &data.test, Some(kstar)).unwrap(),
                    acc_at_full: accuracy_at(&model, &data.test, None).unwrap(),
                }
            })
            .collect();
        let sigma_seconds = sigma_started.elapsed().as_secs_f64();

        Harness {
            toy,
            toy_seconds,
            seeds,
            sigma_rows,
            ce_val_sweep,
            synth_seconds,
            sigma_seconds,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: autodiff correctness
// ---------------------------------------------------------------------------

/// Random values bounded away from zero, for relu-safe inputs.
fn kink_safe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(1e-2..1.0)
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

#[test]
fn criterion_1_autodiff_gradients() {
    let started = Instant::now();
    let eps = 1e-4;
    let points = 100;
    let mut worst: (f64, &str) = (0.0, "none");

    let mut check = |name: &'static str,
                     f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);
        let mut max_err: f64 = 0.0;
        for _ in 0..points {
            max_err = max_err.max(f(&mut rng));
        }
        assert!(max_err < 1e-5, "{name}: grad error {max_err}");
        if max_err > worst.0 {
            worst = (max_err, name);
        }
    };

    check("matmul", &mut |rng| {
        let a = tensor(rng, vec![3, 4]);
        let b = tensor(rng, vec![4, 2]);
        grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                Ok(t.sum(m))
            },
            &[a, b],
            eps,
        )
        .unwrap()
    });
    check("affine", &mut |rng| {
        let x = tensor(rng, vec![3, 4]);
        let w = tensor(rng, vec![4, 2]);
        let b = tensor(rng, vec![2]);
        grad_check(
            |t, v| {
                let m = t.affine(v[0], v[1], v[2])?;
                Ok(t.sum(m))
            },
            &[x, w, b],
            eps,
        )
        .unwrap()
    });
    check("add_sub_mul_scale", &mut |rng| {
        let a = tensor(rng, vec![6]);
        let b = tensor(rng, vec![6]);
        grad_check(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[0])?;
                let sc = t.scale(m, 1.7);
                Ok(t.sum(sc))
            },
            &[a, b],
            eps,
        )
        .unwrap()
    });
    check("relu", &mut |rng| {
        let x = Tensor::vector(kink_safe(rng, 8)).with_grad();
        grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            eps,
        )
        .unwrap()
    });
    check("softmax_cross_entropy", &mut |rng| {
        let logits = tensor(rng, vec![4, 3]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        grad_check(
            |t, v| {
                let l = t.softmax_cross_entropy(v[0], &labels)?;
                Ok(t.mean(l))
            },
            &[logits],
            eps,
        )
        .unwrap()
    });
    check("mse", &mut |rng| {
        let p = tensor(rng, vec![7]);
        let y = tensor(rng, vec![7]);
        grad_check(|t, v| t.mse(v[0], v[1]), &[p, y], eps).unwrap()
    });
    check("add_row_mul_row", &mut |rng| {
        let x = tensor(rng, vec![3, 5]);
        let r = tensor(rng, vec![5]);
        grad_check(
            |t, v| {
                let a = t.add_row(v[0], v[1])?;
                let m = t.mul_row(a, v[1])?;
                Ok(t.sum(m))
            },
            &[x, r],
            eps,
        )
        .unwrap()
    });
    check("prefix_mask", &mut |rng| {
        let x = tensor(rng, vec![3, 6]);
        let keep = rng.gen_range(1..=6);
        grad_check(
            |t, v| {
                let m = t.prefix_mask(v[0], keep)?;
                Ok(t.sum(m))
            },
            &[x],
            eps,
        )
        .unwrap()
    });
    // Full regression architecture, end to end, at init seeds whose relu
    // pre-activations sit away from the kinks.
    let x = Tensor::matrix(4, 1, vec![0.5, 3.0, 6.5, 9.0]).unwrap();
    let y = Tensor::vector(vec![0.4, 3.2, 6.3, 9.1]);
    let mut mlp_worst: f64 = 0.0;
    for seed in [0u64, 2, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = {
            use noiselab::nn::Linear;
            Mlp::new(
                vec![
                    Layer::Linear(Linear::new(1, 64, &mut rng)),
                    Layer::Relu,
                    Layer::Linear(Linear::new(64, 128, &mut rng)),
                    Layer::Relu,
                    Layer::Linear(Linear::new(128, 1, &mut rng)),
                ],
                [3],
            )
            .unwrap()
        };
        let params: Vec<Tensor> = model.param_tensors().iter().map(|t| (*t).clone()).collect();
        let err = grad_check(
            |t, v: &[Var]| {
                let xv = t.leaf(&x);
                let h = t.affine(xv, v[0], v[1])?;
                let h = t.relu(h);
                let h = t.affine(h, v[2], v[3])?;
                let h = t.relu(h);
                let h = t.affine(h, v[4], v[5])?;
                let yv = t.leaf(&y);
                t.mse(h, yv)
            },
            &params,
            eps,
        )
        .unwrap();
        assert!(err < 1e-5, "full MLP seed {seed}: grad error {err}");
        mlp_worst = mlp_worst.max(err);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "criterion 1 took {elapsed:.1}s (budget 10s)");
    println!(
        "ACCEPTANCE 1 autodiff-gradients: PASS (worst primitive {:.2e} [{}], full MLP {:.2e}, {:.1}s)",
        worst.0, worst.1, mlp_worst, elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: index-distribution sampler
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_sampler_statistics() {
    let started = Instant::now();
    let draws = 1_000_000usize;
    let mut report = Vec::new();
    for sigma in [25.0, 200.0] {
        let dist = k_distribution(&NestedConfig::new(sigma, 128).unwrap()).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        for w in dist.probs().windows(2) {
            assert!(w[0] > w[1], "sigma {sigma}: probs not strictly decreasing");
        }
        let mut counts = vec![0u64; 128];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5a317e);
        for _ in 0..draws {
            counts[sample_k(&dist, &mut rng) - 1] += 1;
        }
        let tv: f64 = 0.5
            * dist
                .probs()
                .iter()
                .zip(&counts)
                .map(|(&p, &c)| (p - c as f64 / draws as f64).abs())
                .sum::<f64>();
        assert!(tv < 0.01, "sigma {sigma}: TV distance {tv}");
        report.push(format!("sigma {sigma}: TV {tv:.5}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "criterion 2 took {elapsed:.1}s (budget 5s)");
    println!(
        "ACCEPTANCE 2 sampler-statistics: PASS ({}, {:.1}s)",
        report.join("; "),
        elapsed
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: nesting laws
// ---------------------------------------------------------------------------

fn masked(tape_values: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let t = if rows == 1 {
        Tensor::vector(tape_values.to_vec())
    } else {
        Tensor::matrix(rows, cols, tape_values.to_vec()).unwrap()
    };
    let v = tape.leaf(&t);
    let out = tape.prefix_mask(v, k).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn criterion_3_nesting_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // Exhaustive over all 1 <= k1 <= k2 <= K for K <= 32, vectors and
    // matrices.
    for width in 1usize..=32 {
        for rows in [1usize, 3] {
            let values: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for k2 in 1..=width {
                let at_k2 = masked(&values, rows, width, k2);
                for k1 in 1..=k2 {
                    let direct = masked(&values, rows, width, k1);
                    let composed = masked(&at_k2, rows, width, k1);
                    assert!(
                        direct.iter().zip(&composed).all(|(a, b)| a.to_bits() == b.to_bits()),
                        "nesting law failed at K={width}, k1={k1}, k2={k2}"
                    );
                    let twice = masked(&direct, rows, width, k1);
                    assert!(
                        direct.iter().zip(&twice).all(|(a, b)| a.to_bits() == b.to_bits()),
                        "idempotence failed at K={width}, k={k1}"
                    );
                }
            }
        }
    }
    // Sampled for K = 128.
    let values: Vec<f64> = (0..128).map(|_| rng.gen_range(-5.0..5.0)).collect();
    for _ in 0..300 {
        let a = rng.gen_range(1..=128);
        let b = rng.gen_range(1..=128);
        let (k1, k2) = (a.min(b), a.max(b));
        let direct = masked(&values, 1, 128, k1);
        let composed = masked(&masked(&values, 1, 128, k2), 1, 128, k1);
        assert!(direct.iter().zip(&composed).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // Masked-channel gradients are exactly zero.
    for &(width, k) in &[(16usize, 5usize), (128, 31)] {
        let mut tape = Tape::new();
        let x = Tensor::vector((0..width).map(|i| i as f64 * 0.1 + 0.05).collect()).with_grad();
        let v = tape.leaf(&x);
        let m = tape.prefix_mask(v, k).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        let grad = tape.grad(v).unwrap();
        assert!(grad[k..].iter().all(|&g| g == 0.0));
        assert!(grad[..k].iter().all(|&g| g == 1.0));
    }
    println!("ACCEPTANCE 3 nesting-laws: PASS (exhaustive K<=32, sampled K=128, gradient gating exact)");
}

// ---------------------------------------------------------------------------
// Criterion 4: toy regression orderings
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_toy_regression() {
    let h = harness();
    let mut passes = 0;
    for row in &h.toy {
        let ok = row.k10_mse < row.plain_mse && row.k100_mse > row.k10_mse;
        println!(
            "  toy seed {}: plain {:.4}, k10 {:.4}, k100 {:.4} -> {}",
            row.seed,
            row.plain_mse,
            row.k10_mse,
            row.k100_mse,
            if ok { "ok" } else { "fail" }
        );
        passes += usize::from(ok);
    }
    assert!(
        passes >= 4,
        "toy orderings held in only {passes} of {} seeds",
        h.toy.len()
    );
    assert!(
        h.toy_seconds < 300.0,
        "toy phase took {:.1}s (budget 300s)",
        h.toy_seconds
    );
    println!(
        "ACCEPTANCE 4 toy-regression: PASS ({passes}/5 seeds, {:.1}s)",
        h.toy_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: synthetic noisy classification orderings
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_synthetic_orderings() {
    let h = harness();
    let mut passes = 0;
    for row in &h.seeds {
        let ok = row.ce_acc < row.nested_acc
            && row.nested_acc <= row.ensemble_acc
            && row.ensemble_acc - row.ce_acc >= 0.02;
        println!(
            "  seed {}: CE {:.4} | nested@k* {:.4} | ensemble@k*({},{}) {:.4} -> {}",
            row.seed,
            row.ce_acc,
            row.nested_acc,
            row.kstars.0,
            row.kstars.1,
            row.ensemble_acc,
            if ok { "ok" } else { "fail" }
        );
        passes += usize::from(ok);
    }
    assert!(
        passes >= 4,
        "accuracy orderings held in only {passes} of {} seeds",
        h.seeds.len()
    );
    assert!(
        h.synth_seconds < 600.0,
        "synthetic phase took {:.1}s (budget 600s)",
        h.synth_seconds
    );
    println!(
        "ACCEPTANCE 5 synthetic-orderings: PASS ({passes}/5 seeds, {:.1}s)",
        h.synth_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: small-loss premise (selection purity)
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_selection_purity() {
    let h = harness();
    let mut min_purity = f64::INFINITY;
    for row in &h.seeds {
        for epoch in row.stage2_metrics.epochs.iter().skip(1) {
            let purity = epoch
                .selection_purity
                .expect("stage-2 epochs record purity");
            assert!(
                purity >= 0.75,
                "seed {} epoch {}: purity {:.4} below 0.75",
                row.seed,
                epoch.epoch,
                purity
            );
            min_purity = min_purity.min(purity);
        }
    }
    println!(
        "ACCEPTANCE 6 selection-purity: PASS (min epoch purity {:.4} >= 0.75 across all seeds)",
        min_purity
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: compression property
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_compression() {
    let h = harness();
    let quarter = FEATURE_WIDTH / 4;
    for row in &h.sigma_rows {
        println!(
            "  sigma {}: k* {} | acc@k* {:.4} | acc@full {:.4}",
            row.sigma, row.kstar, row.acc_at_kstar, row.acc_at_full
        );
        assert!(
            row.kstar < quarter,
            "sigma {}: k* {} not below K/4 = {quarter}",
            row.sigma,
            row.kstar
        );
        assert!(
            row.acc_at_kstar >= row.acc_at_full - 0.01,
            "sigma {}: accuracy at k* ({:.4}) more than 1pp below full ({:.4})",
            row.sigma,
            row.acc_at_kstar,
            row.acc_at_full
        );
    }
    // The plain cross-entropy baseline shows no such plateau: no truncation
    // below K/4 comes within 1pp of its full-width accuracy.
    let full = h.ce_val_sweep.last().unwrap().1;
    let best_below: f64 = h
        .ce_val_sweep
        .iter()
        .filter(|&&(k, _)| k < quarter)
        .map(|&(_, a)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        best_below < full - 0.01,
        "CE baseline plateaus below K/4: best {best_below:.4} vs full {full:.4}"
    );
    println!(
        "ACCEPTANCE 7 compression: PASS (all k* < {quarter}; CE best below K/4 {:.4} vs full {:.4}; {:.1}s)",
        best_below, full, h.sigma_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: schedule contracts
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_schedule_contracts() {
    // Gradual keep fraction: 1.0 at epoch 0, 1 - lambda from the ramp end.
    let cfg = CoteachConfig::new(
        0.3,
        ForgetSchedule::Gradual(10),
        SelectionForward::FullChannels,
    )
    .unwrap();
    assert_eq!(keep_fraction_at(&cfg, 0), 1.0);
    for epoch in 10..40 {
        assert!((keep_fraction_at(&cfg, epoch) - 0.7).abs() < 1e-12);
    }

    // Warm-up ramp: nondecreasing, reaching base_lr exactly at the boundary.
    let schedule = LrSchedule::new(2e-2, 6000, vec![(5, 0.1)]).unwrap();
    let mut prev = 0.0;
    for it in 0..6000 {
        let lr = schedule.lr_at(it, 0);
        assert!(lr >= prev);
        prev = lr;
    }
    assert_eq!(schedule.lr_at(5999, 0), 2e-2);
    assert_eq!(schedule.lr_at(6000, 0), 2e-2);

    // Frozen batch norm is bitwise unchanged across a whole stage two.
    let clean = gen_gaussian_blobs(700, 4, 8, 6.0, 81).unwrap();
    let spec = SplitSpec::from_counts(500, 100, 100, 82).unwrap();
    let (train, _, _) = split(&clean, &spec).unwrap();
    let train = inject_symmetric_noise(&train, 0.3, 83).unwrap();
    let mk = |seed: u64| {
        let mut rng = stream_rng(seed, STREAM_INIT);
        build_classifier_mlp(8, 16, 16, 4, true, &mut rng)
    };
    let mut m1 = mk(84);
    let mut m2 = mk(85);
    //一 pretraining epoch gives the running stats nontrivial values.
    let pre = Stage1Config {
        nested: None,
        sgd: noiselab::nn::SgdConfig::new(0.9, 5e-4, LrSchedule::new(1e-2, 0, vec![]).unwrap())
            .unwrap(),
        epochs: 1,
        batch_size: 64,
        seed: 86,
    };
    train_stage1(&mut m1, &train, None, None, &pre).unwrap();
    train_stage1(&mut m2, &train, None, None, &pre).unwrap();
    freeze_batchnorm(&mut m1);
    freeze_batchnorm(&mut m2);
    let bn_bits = |m: &Mlp| -> Vec<u64> {
        m.layers()
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(
                    bn.gamma
                        .data()
                        .iter()
                        .chain(bn.beta.data())
                        .chain(&bn.running_mean)
                        .chain(&bn.running_var)
                        .map(|v| v.to_bits())
                        .collect::<Vec<u64>>(),
                ),
                _ => None,
            })
            .flatten()
            .collect()
    };
    let before = (bn_bits(&m1), bn_bits(&m2));
    let stage2 = Stage2Config {
        coteach: CoteachConfig::new(0.3, ForgetSchedule::Fixed, SelectionForward::FullChannels)
            .unwrap(),
        nested: Some(NestedConfig::new(8.0, 16).unwrap()),
        sgd: noiselab::nn::SgdConfig::new(0.9, 5e-4, LrSchedule::new(2e-3, 0, vec![]).unwrap())
            .unwrap(),
        epochs: 4,
        batch_size: 64,
        freeze_bn: true,
        seed: 87,
    };
    train_stage2(&mut m1, &mut m2, &train, None, None, &stage2).unwrap();
    assert_eq!(before.0, bn_bits(&m1));
    assert_eq!(before.1, bn_bits(&m2));

    println!("ACCEPTANCE 8 schedule-contracts: PASS (keep fraction, warm-up boundary, frozen BN bitwise)");
}
