//! The two training stages.

use rand::seq::SliceRandom;

use crate::coteach::{coteach_step, keep_fraction_at, CoteachStepHp, Peer};
use crate::data::NoisyClassificationDataset;
use crate::error::{Error, Result};
use crate::metrics::{EpochRecord, RunMetrics};
use crate::nested::{accuracy_at, k_distribution, sample_k, KDistribution};
use crate::nn::{freeze_batchnorm, train_step_class, Mlp, SgdState, StepAt};
use crate::pipeline::{ensemble_accuracy, Stage1Config, Stage2Config};
use crate::seeds::{stream_rng, STREAM_MASK_A, STREAM_MASK_B, STREAM_SHUFFLE};

/// Train / validation / test partition of one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: NoisyClassificationDataset,
    pub val: NoisyClassificationDataset,
    pub test: NoisyClassificationDataset,
}

fn resolve_dist(nested: &Option<crate::nested::NestedConfig>, model: &Mlp) -> Result<Option<KDistribution>> {
    match nested {
        None => Ok(None),
        Some(cfg) => {
            let width = model.nested_width().ok_or_else(|| {
                Error::contract("nested dropout configured but model has no nested position")
            })?;
            if cfg.channels != width {
                return Err(Error::config(format!(
                    "nested channel count {} does not match model feature width {width}",
                    cfg.channels
                )));
            }
            Ok(Some(k_distribution(cfg)?))
        }
    }
}

/// Mini-batch index schedule for one epoch. Batches of one sample are
/// dropped: training-mode batch statistics are undefined there.
fn epoch_batches(
    n: usize,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch_size)
        .filter(|c| c.len() > 1 || batch_size == 1)
        .map(|c| c.to_vec())
        .collect()
}

/// Stage one: standard mini-batch SGD with per-iteration learning rate
/// (warm-up honored) and one sampled mask per iteration when nested dropout
/// is configured. Validation/test accuracy is recorded each epoch when the
/// corresponding split is provided.
pub fn train_stage1(
    model: &mut Mlp,
    data: &NoisyClassificationDataset,
    val: Option<&NoisyClassificationDataset>,
    test: Option<&NoisyClassificationDataset>,
    cfg: &Stage1Config,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("stage-one training data is empty"));
    }
    let dist = resolve_dist(&cfg.nested, model)?;
    let mut metrics = RunMetrics::new(cfg.seed, serde_json::to_value(cfg)?);
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream_rng(cfg.seed, STREAM_MASK_A);
    let mut opt = SgdState::for_model(model);
    let mut iter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut last_lr = cfg.sgd.base_lr();
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut shuffle_rng) {
            let (x, y, _) = data.gather(&batch)?;
            let lr = cfg.sgd.schedule.lr_at(iter, epoch);
            let k = dist.as_ref().map(|d| sample_k(d, &mut mask_rng));
            let loss = train_step_class(
                model,
                &mut opt,
                cfg.sgd.momentum,
                cfg.sgd.weight_decay,
                lr,
                &x,
                &y,
                k,
                StepAt { epoch, iter },
            )?;
            loss_sum += loss;
            loss_count += 1;
            last_lr = lr;
            iter += 1;
        }
        metrics.push_epoch(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            learning_rate: last_lr,
            val_accuracy: val.map(|ds| accuracy_at(model, ds, None)).transpose()?,
            test_accuracy: test.map(|ds| accuracy_at(model, ds, None)).transpose()?,
            selection_purity: None,
            mean_kept_fraction: None,
        })?;
    }
    Ok(metrics)
}

/// Stage two: co-teaching fine-tuning of two pretrained peers. Batch norm is
/// frozen first when configured; per-epoch selection purity and kept
/// fraction are averaged over batches and both peers.
pub fn train_stage2(
    model1: &mut Mlp,
    model2: &mut Mlp,
    data: &NoisyClassificationDataset,
    val: Option<&NoisyClassificationDataset>,
    test: Option<&NoisyClassificationDataset>,
    cfg: &Stage2Config,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("stage-two training data is empty"));
    }
    if !model1.same_architecture(model2) {
        return Err(Error::contract(
            "co-teaching peers must share an architecture",
        ));
    }
    if cfg.freeze_bn {
        freeze_batchnorm(model1);
        freeze_batchnorm(model2);
    }
    let dist = resolve_dist(&cfg.nested, model1)?;
    let mut metrics = RunMetrics::new(cfg.seed, serde_json::to_value(cfg)?);
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng1 = stream_rng(cfg.seed, STREAM_MASK_A);
    let mut mask_rng2 = stream_rng(cfg.seed, STREAM_MASK_B);
    let mut opt1 = SgdState::for_model(model1);
    let mut opt2 = SgdState::for_model(model2);
    let mut iter = 0usize;

    for epoch in 0..cfg.epochs {
        let keep_fraction = keep_fraction_at(&cfg.coteach, epoch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut purity_sum = 0.0;
        let mut purity_count = 0usize;
        let mut kept_sum = 0.0;
        let mut kept_count = 0usize;
        let mut last_lr = cfg.sgd.base_lr();
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut shuffle_rng) {
            let (x, y, flags) = data.gather(&batch)?;
            let lr = cfg.sgd.schedule.lr_at(iter, epoch);
            let out = coteach_step(
                &x,
                &y,
                Some(&flags),
                Peer {
                    model: model1,
                    opt: &mut opt1,
                    rng: &mut mask_rng1,
                },
                Peer {
                    model: model2,
                    opt: &mut opt2,
                    rng: &mut mask_rng2,
                },
                &cfg.coteach,
                dist.as_ref(),
                CoteachStepHp {
                    keep_fraction,
                    momentum: cfg.sgd.momentum,
                    weight_decay: cfg.sgd.weight_decay,
                    lr,
                    at: StepAt { epoch, iter },
                },
            )?;
            for s in [&out.sel1, &out.sel2] {
                if let Some(p) = s.purity {
                    purity_sum += p;
                    purity_count += 1;
                }
                kept_sum += s.kept_count as f64 / batch.len() as f64;
                kept_count += 1;
            }
            loss_sum += 0.5 * (out.loss1 + out.loss2);
            loss_count += 1;
            last_lr = lr;
            iter += 1;
        }
        metrics.push_epoch(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            learning_rate: last_lr,
            val_accuracy: val
                .map(|ds| ensemble_accuracy(model1, model2, ds, None, None))
                .transpose()?,
            test_accuracy: test
                .map(|ds| ensemble_accuracy(model1, model2, ds, None, None))
                .transpose()?,
            selection_purity: (purity_count > 0).then(|| purity_sum / purity_count as f64),
            mean_kept_fraction: (kept_count > 0).then(|| kept_sum / kept_count as f64),
        })?;
    }
    Ok(metrics)
}
