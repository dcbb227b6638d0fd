//! Small-loss instance selection and the cross-update step between two peer
//! networks: each model trains on the samples its peer selected.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nested::{sample_k, KDistribution};
use crate::nn::{eval_losses, train_step_class, Mlp, SgdState, StepAt};

/// How the keep fraction evolves over fine-tune epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "ramp_epochs")]
pub enum ForgetSchedule {
    /// Keep 1 - lambda_forget from the first epoch.
    Fixed,
    /// Keep everything at epoch 0, ramping linearly down to 1 - lambda_forget
    /// at the given epoch, constant afterwards.
    Gradual(usize),
}

/// Forward mode for the selection pass. `FullChannels` ranks losses with no
/// nested mask; `SampledMask` draws a mask for the ranking pass as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionForward {
    FullChannels,
    SampledMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoteachConfig {
    pub lambda_forget: f64,
    pub schedule: ForgetSchedule,
    pub selection_forward: SelectionForward,
}

impl CoteachConfig {
    pub fn new(
        lambda_forget: f64,
        schedule: ForgetSchedule,
        selection_forward: SelectionForward,
    ) -> Result<Self> {
        let cfg = CoteachConfig {
            lambda_forget,
            schedule,
            selection_forward,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda_forget) {
            return Err(Error::config(format!(
                "lambda_forget must be in [0,1), got {}",
                self.lambda_forget
            )));
        }
        if let ForgetSchedule::Gradual(n) = self.schedule {
            if n < 1 {
                return Err(Error::config("gradual schedule needs ramp_epochs >= 1"));
            }
        }
        Ok(())
    }
}

/// Fraction of the batch kept at the given epoch.
pub fn keep_fraction_at(config: &CoteachConfig, epoch: usize) -> f64 {
    match config.schedule {
        ForgetSchedule::Fixed => 1.0 - config.lambda_forget,
        ForgetSchedule::Gradual(n) => {
            let progress = (epoch as f64 / n as f64).min(1.0);
            1.0 - config.lambda_forget * progress
        }
    }
}

/// Outcome of one small-loss selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Kept batch indices, ascending.
    pub kept_indices: Vec<usize>,
    pub kept_count: usize,
    /// Fraction of kept samples whose clean flag is true, when flags exist.
    pub purity: Option<f64>,
}

/// Keep the `max(1, floor(keep_fraction * n))` smallest-loss indices.
/// Ties break toward the smaller index; every kept loss is <= every
/// discarded loss up to ties.
pub fn select_small_loss(losses: &[f64], keep_fraction: f64) -> Result<SelectionResult> {
    if losses.is_empty() {
        return Err(Error::contract("select_small_loss on an empty batch"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "keep_fraction must be in (0,1], got {keep_fraction}"
        )));
    }
    let n = losses.len();
    let m = ((keep_fraction * n as f64).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..m].to_vec();
    kept.sort_unstable();
    Ok(SelectionResult {
        kept_count: kept.len(),
        kept_indices: kept,
        purity: None,
    })
}

/// Fraction of the kept set whose clean flag is true.
pub fn selection_purity(result: &SelectionResult, clean_flags: &[bool]) -> f64 {
    if result.kept_indices.is_empty() {
        return 0.0;
    }
    let clean = result
        .kept_indices
        .iter()
        .filter(|&&i| clean_flags[i])
        .count();
    clean as f64 / result.kept_indices.len() as f64
}

/// One peer network with its optimizer state and mask stream.
pub struct Peer<'a> {
    pub model: &'a mut Mlp,
    pub opt: &'a mut SgdState,
    pub rng: &'a mut ChaCha8Rng,
}

/// Shared step hyper-parameters resolved by the caller for this iteration.
#[derive(Debug, Clone, Copy)]
pub struct CoteachStepHp {
    pub keep_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub at: StepAt,
}

/// What one co-teaching step produced: each peer's selection plus the
/// training loss of each peer's update pass.
#[derive(Debug, Clone)]
pub struct CoteachOutcome {
    pub sel1: SelectionResult,
    pub sel2: SelectionResult,
    pub loss1: f64,
    pub loss2: f64,
}

/// One co-teaching update on a mini-batch.
///
/// Each model first ranks the batch by per-sample loss in evaluation mode
/// (running batch-norm statistics); with `FullChannels` this ranking pass
/// uses no nested mask. Each model then updates on the sample set selected
/// by its peer, with a freshly sampled nested mask per model whenever a
/// distribution is configured.
#[allow(clippy::too_many_arguments)]
pub fn coteach_step(
    x: &Tensor,
    labels: &[usize],
    clean_flags: Option<&[bool]>,
    peer1: Peer,
    peer2: Peer,
    config: &CoteachConfig,
    nested: Option<&KDistribution>,
    hp: CoteachStepHp,
) -> Result<CoteachOutcome> {
    let n = labels.len();
    if let Some(flags) = clean_flags {
        if flags.len() != n {
            return Err(Error::contract("clean flags must cover the batch"));
        }
    }
    let Peer {
        model: model1,
        opt: opt1,
        rng: rng1,
    } = peer1;
    let Peer {
        model: model2,
        opt: opt2,
        rng: rng2,
    } = peer2;

    // Selection pass. Mask draws (SampledMask only) come from each peer's own
    // stream, before its update draw.
    let sel_mask1 = match config.selection_forward {
        SelectionForward::FullChannels => None,
        SelectionForward::SampledMask => nested.map(|d| sample_k(d, rng1)),
    };
    let sel_mask2 = match config.selection_forward {
        SelectionForward::FullChannels => None,
        SelectionForward::SampledMask => nested.map(|d| sample_k(d, rng2)),
    };
    let losses1 = eval_losses(model1, x, labels, sel_mask1)?;
    let losses2 = eval_losses(model2, x, labels, sel_mask2)?;
    let mut sel1 = select_small_loss(&losses1, hp.keep_fraction)?;
    let mut sel2 = select_small_loss(&losses2, hp.keep_fraction)?;
    if let Some(flags) = clean_flags {
        sel1.purity = Some(selection_purity(&sel1, flags));
        sel2.purity = Some(selection_purity(&sel2, flags));
    }

    // Cross update: model1 trains on model2's selection and vice versa.
    let k1 = nested.map(|d| sample_k(d, rng1));
    let (x1, y1) = gather_batch(x, labels, &sel2.kept_indices)?;
    let loss1 = train_step_class(
        model1,
        opt1,
        hp.momentum,
        hp.weight_decay,
        hp.lr,
        &x1,
        &y1,
        k1,
        hp.at,
    )?;

    let k2 = nested.map(|d| sample_k(d, rng2));
    let (x2, y2) = gather_batch(x, labels, &sel1.kept_indices)?;
    let loss2 = train_step_class(
        model2,
        opt2,
        hp.momentum,
        hp.weight_decay,
        hp.lr,
        &x2,
        &y2,
        k2,
        hp.at,
    )?;

    Ok(CoteachOutcome {
        sel1,
        sel2,
        loss1,
        loss2,
    })
}

fn gather_batch(x: &Tensor, labels: &[usize], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let cols = x.shape()[1];
    let mut feats = Vec::with_capacity(indices.len() * cols);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        feats.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
        y.push(labels[i]);
    }
    Ok((Tensor::matrix(indices.len(), cols, feats)?, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear};
    use rand::SeedableRng;

    fn cfg(lambda: f64, schedule: ForgetSchedule) -> CoteachConfig {
        CoteachConfig::new(lambda, schedule, SelectionForward::FullChannels).unwrap()
    }

    #[test]
    fn keep_fraction_schedules() {
        let gradual = cfg(0.3, ForgetSchedule::Gradual(10));
        assert_eq!(keep_fraction_at(&gradual, 0), 1.0);
        assert!((keep_fraction_at(&gradual, 5) - 0.85).abs() < 1e-15);
        assert!((keep_fraction_at(&gradual, 10) - 0.7).abs() < 1e-15);
        assert!((keep_fraction_at(&gradual, 100) - 0.7).abs() < 1e-15);
        let fixed = cfg(0.3, ForgetSchedule::Fixed);
        for epoch in [0, 1, 7, 50] {
            assert!((keep_fraction_at(&fixed, epoch) - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn keep_fraction_nonincreasing() {
        let gradual = cfg(0.45, ForgetSchedule::Gradual(7));
        let mut prev = f64::INFINITY;
        for epoch in 0..30 {
            let f = keep_fraction_at(&gradual, epoch);
            assert!(f <= prev + 1e-15);
            prev = f;
        }
    }

    #[test]
    fn select_small_loss_basic() {
        let sel = select_small_loss(&[0.9, 0.1, 0.5, 0.2], 0.5).unwrap();
        assert_eq!(sel.kept_indices, vec![1, 3]);
        assert_eq!(sel.kept_count, 2);
    }

    #[test]
    fn select_keep_all() {
        let sel = select_small_loss(&[3.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!(sel.kept_indices, vec![0, 1, 2]);
    }

    #[test]
    fn select_tie_breaks_by_index() {
        let sel = select_small_loss(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(sel.kept_indices, vec![0, 1]);
    }

    #[test]
    fn select_count_independent_of_losses() {
        for frac in [0.25, 0.5, 0.7, 0.99] {
            for n in [1usize, 2, 7, 100] {
                let losses: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64).collect();
                let sel = select_small_loss(&losses, frac).unwrap();
                let expected = (((frac * n as f64).floor() as usize).max(1)).min(n);
                assert_eq!(sel.kept_count, expected, "n={n}, frac={frac}");
            }
        }
    }

    #[test]
    fn select_monotone_in_keep_fraction() {
        let losses = [0.4, 0.1, 0.9, 0.1, 0.3, 0.7, 0.2];
        let mut prev: Vec<usize> = Vec::new();
        for frac in [0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0] {
            let sel = select_small_loss(&losses, frac).unwrap();
            assert!(
                prev.iter().all(|i| sel.kept_indices.contains(i)),
                "{prev:?} not subset of {:?} at frac {frac}",
                sel.kept_indices
            );
            prev = sel.kept_indices;
        }
    }

    #[test]
    fn select_rejects_empty_batch() {
        assert!(select_small_loss(&[], 0.5).is_err());
    }

    #[test]
    fn purity_examples() {
        let sel = SelectionResult {
            kept_indices: vec![0, 1, 2],
            kept_count: 3,
            purity: None,
        };
        assert_eq!(selection_purity(&sel, &[true, true, true]), 1.0);
        assert_eq!(selection_purity(&sel, &[false, false, false]), 0.0);
        let flags = [true, false, true];
        assert!((selection_purity(&sel, &flags) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stub_losses_give_pure_selection() {
        // Noisy samples get loss 10, clean ones 0.1; with a 0.7 clean rate
        // and lambda 0.3 the kept set is entirely clean.
        let n = 40;
        let clean: Vec<bool> = (0..n).map(|i| i % 10 < 7).collect();
        let losses: Vec<f64> = clean.iter().map(|&c| if c { 0.1 } else { 10.0 }).collect();
        let mut sel = select_small_loss(&losses, 0.7).unwrap();
        sel.purity = Some(selection_purity(&sel, &clean));
        assert_eq!(sel.purity, Some(1.0));
    }

    fn small_model(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(
            vec![
                Layer::Linear(Linear::new(2, 8, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::new(8, 3, &mut rng)),
            ],
            [1],
        )
        .unwrap()
    }

    fn demo_batch() -> (Tensor, Vec<usize>) {
        let n = 12;
        let feats: Vec<f64> = (0..n)
            .flat_map(|i| {
                let c = (i % 3) as f64;
                [c * 3.0 - 3.0, 1.0 - c]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        (Tensor::matrix(n, 2, feats).unwrap(), labels)
    }

    #[test]
    fn identical_peers_make_symmetric_selections() {
        let (x, labels) = demo_batch();
        let mut m1 = small_model(3);
        let mut m2 = m1.clone();
        let mut o1 = SgdState::for_model(&m1);
        let mut o2 = SgdState::for_model(&m2);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let config = cfg(0.3, ForgetSchedule::Fixed);
        let out = coteach_step(
            &x,
            &labels,
            None,
            Peer {
                model: &mut m1,
                opt: &mut o1,
                rng: &mut r1,
            },
            Peer {
                model: &mut m2,
                opt: &mut o2,
                rng: &mut r2,
            },
            &config,
            None,
            CoteachStepHp {
                keep_fraction: keep_fraction_at(&config, 0),
                momentum: 0.9,
                weight_decay: 0.0,
                lr: 1e-2,
                at: StepAt::default(),
            },
        )
        .unwrap();
        assert_eq!(out.sel1.kept_indices, out.sel2.kept_indices);
        assert!(out.loss1.is_finite() && out.loss2.is_finite());
    }

    #[test]
    fn zero_forget_rate_equals_independent_steps() {
        let (x, labels) = demo_batch();
        let dist = crate::nested::k_distribution(
            &crate::nested::NestedConfig::new(4.0, 8).unwrap(),
        )
        .unwrap();

        // Path A: coteach with lambda = 0.
        let mut m1 = small_model(7);
        let mut m2 = small_model(8);
        let mut o1 = SgdState::for_model(&m1);
        let mut o2 = SgdState::for_model(&m2);
        let mut r1 = ChaCha8Rng::seed_from_u64(100);
        let mut r2 = ChaCha8Rng::seed_from_u64(200);
        let config = cfg(0.0, ForgetSchedule::Fixed);
        coteach_step(
            &x,
            &labels,
            None,
            Peer {
                model: &mut m1,
                opt: &mut o1,
                rng: &mut r1,
            },
            Peer {
                model: &mut m2,
                opt: &mut o2,
                rng: &mut r2,
            },
            &config,
            Some(&dist),
            CoteachStepHp {
                keep_fraction: 1.0,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr: 1e-2,
                at: StepAt::default(),
            },
        )
        .unwrap();

        // Path B: two independent standard steps on the full batch with the
        // same seeds.
        let mut n1 = small_model(7);
        let mut n2 = small_model(8);
        let mut p1 = SgdState::for_model(&n1);
        let mut p2 = SgdState::for_model(&n2);
        let mut q1 = ChaCha8Rng::seed_from_u64(100);
        let mut q2 = ChaCha8Rng::seed_from_u64(200);
        let k1 = sample_k(&dist, &mut q1);
        train_step_class(
            &mut n1,
            &mut p1,
            0.9,
            5e-4,
            1e-2,
            &x,
            &labels,
            Some(k1),
            StepAt::default(),
        )
        .unwrap();
        let k2 = sample_k(&dist, &mut q2);
        train_step_class(
            &mut n2,
            &mut p2,
            0.9,
            5e-4,
            1e-2,
            &x,
            &labels,
            Some(k2),
            StepAt::default(),
        )
        .unwrap();

        for (a, b) in m1.param_tensors().iter().zip(n1.param_tensors()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in m2.param_tensors().iter().zip(n2.param_tensors()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn cross_update_depends_only_on_peer_selection() {
        // Perturbing samples that model1 did NOT select must leave model2's
        // update unchanged (model2 trains on model1's selection).
        let (x, labels) = demo_batch();
        let config = cfg(0.4, ForgetSchedule::Fixed);
        let kf = keep_fraction_at(&config, 0);

        let base1 = small_model(21);
        let base2 = small_model(22);
        let losses1 = eval_losses(&base1, &x, &labels, None).unwrap();
        let sel1 = select_small_loss(&losses1, kf).unwrap();
        let discarded: Vec<usize> = (0..labels.len())
            .filter(|i| !sel1.kept_indices.contains(i))
            .collect();
        assert!(!discarded.is_empty());

        // Push the discarded samples further into "wrong" territory so their
        // losses grow and model1's selection set is provably unchanged.
        let mut x_pert = x.clone();
        let cols = x.shape()[1];
        for &i in &discarded {
            for v in x_pert.data_mut()[i * cols..(i + 1) * cols].iter_mut() {
                *v *= 3.0;
                *v += 1.0;
            }
        }
        let losses1_pert = eval_losses(&base1, &x_pert, &labels, None).unwrap();
        let sel1_pert = select_small_loss(&losses1_pert, kf).unwrap();
        assert_eq!(sel1.kept_indices, sel1_pert.kept_indices, "precondition");

        let run = |x: &Tensor| -> Vec<u64> {
            let mut m1 = base1.clone();
            let mut m2 = base2.clone();
            let mut o1 = SgdState::for_model(&m1);
            let mut o2 = SgdState::for_model(&m2);
            let mut r1 = ChaCha8Rng::seed_from_u64(31);
            let mut r2 = ChaCha8Rng::seed_from_u64(32);
            coteach_step(
                x,
                &labels,
                None,
                Peer {
                    model: &mut m1,
                    opt: &mut o1,
                    rng: &mut r1,
                },
                Peer {
                    model: &mut m2,
                    opt: &mut o2,
                    rng: &mut r2,
                },
                &config,
                None,
                CoteachStepHp {
                    keep_fraction: kf,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    lr: 1e-2,
                    at: StepAt::default(),
                },
            )
            .unwrap();
            m2.param_tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(run(&x), run(&x_pert));
    }
}
