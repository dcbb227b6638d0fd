//! Sigma ablation harness: for each (sigma, seed) cell, pretrain two peers,
//! locate the optimal truncation depth on the validation split, fine-tune
//! with co-teaching, and report the ensembled accuracy at fresh depths.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::nested::{accuracy_at, find_optimal_k, NestedConfig};
use crate::pipeline::{
    build_classifier_mlp, train_stage1, train_stage2, SplitData, Stage1Config, Stage2Config,
};
use crate::seeds::{derive_seed, stream_rng, STREAM_INIT};

/// Architecture and per-stage templates; the harness overrides seeds and the
/// nested configuration per cell.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub hidden: usize,
    pub feature_width: usize,
    pub batch_norm: bool,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

/// One row of the ablation table: mean and standard deviation over seeds.
/// `sigma = None` is the plain cross-entropy baseline row, whose reported
/// optimal depth is the full width.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub sigma: Option<f64>,
    pub runs: usize,
    pub kstar_mean: f64,
    pub kstar_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub coteach_kstar_mean: f64,
    pub coteach_kstar_std: f64,
    pub coteach_acc_mean: f64,
    pub coteach_acc_std: f64,
}

/// Result of one (sigma, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub sigma: Option<f64>,
    pub seed: u64,
    /// Mean of the two peers' single-model optimal depths and accuracies.
    pub kstar: f64,
    pub accuracy: f64,
    /// Fresh depths after fine-tuning, and the ensembled test accuracy.
    pub coteach_kstar: f64,
    pub coteach_accuracy: f64,
}

/// Pretrain two peers (seeds differ, nothing else), report the single-model
/// statistic, fine-tune with co-teaching, and report the ensemble at fresh
/// per-model optimal depths found on the validation split.
pub fn run_cell(
    sigma: Option<f64>,
    seed: u64,
    data: &SplitData,
    setup: &AblationSetup,
) -> Result<CellResult> {
    let dim = data.train.dim();
    let classes = data.train.class_count();
    let nested = sigma
        .map(|s| NestedConfig::new(s, setup.feature_width))
        .transpose()?;

    let mut models = Vec::with_capacity(2);
    for role in 0..2u64 {
        let cell_seed = derive_seed(seed, role);
        let mut init_rng = stream_rng(cell_seed, STREAM_INIT);
        let mut model = build_classifier_mlp(
            dim,
            setup.hidden,
            setup.feature_width,
            classes,
            setup.batch_norm,
            &mut init_rng,
        );
        let cfg = Stage1Config {
            nested,
            seed: cell_seed,
            ..setup.stage1.clone()
        };
        train_stage1(&mut model, &data.train, None, None, &cfg)?;
        models.push(model);
    }
    let mut m2 = models.pop().expect("two models");
    let mut m1 = models.pop().expect("two models");

    // Single-model statistics: validated depth, test accuracy at that depth.
    // The baseline row reports the full width without a sweep.
    let full = setup.feature_width;
    let (k1, k2, acc1, acc2) = if sigma.is_some() {
        let (k1, _) = find_optimal_k(&m1, &data.val)?;
        let (k2, _) = find_optimal_k(&m2, &data.val)?;
        (
            k1,
            k2,
            accuracy_at(&m1, &data.test, Some(k1))?,
            accuracy_at(&m2, &data.test, Some(k2))?,
        )
    } else {
        (
            full,
            full,
            accuracy_at(&m1, &data.test, None)?,
            accuracy_at(&m2, &data.test, None)?,
        )
    };

    let stage2 = Stage2Config {
        nested,
        seed: derive_seed(seed, 2),
        ..setup.stage2.clone()
    };
    train_stage2(&mut m1, &mut m2, &data.train, None, None, &stage2)?;

    let (ck1, ck2) = if sigma.is_some() {
        let (ck1, _) = find_optimal_k(&m1, &data.val)?;
        let (ck2, _) = find_optimal_k(&m2, &data.val)?;
        (ck1, ck2)
    } else {
        (full, full)
    };
    let masked = sigma.is_some();
    let ensemble = crate::pipeline::ensemble_accuracy(
        &m1,
        &m2,
        &data.test,
        masked.then_some(ck1),
        masked.then_some(ck2),
    )?;

    Ok(CellResult {
        sigma,
        seed,
        kstar: 0.5 * (k1 + k2) as f64,
        accuracy: 0.5 * (acc1 + acc2),
        coteach_kstar: 0.5 * (ck1 + ck2) as f64,
        coteach_accuracy: ensemble,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The full table: one row per sigma (plus the baseline row when
/// `include_ce`), each aggregated over `seeds`. Cells run concurrently; each
/// owns its models and rng streams and results merge in (sigma, seed) order.
pub fn run_ablation(
    sigmas: &[f64],
    include_ce: bool,
    seeds: &[u64],
    data: &SplitData,
    setup: &AblationSetup,
) -> Result<Vec<AblationRow>> {
    if sigmas.is_empty() && !include_ce {
        return Err(crate::error::Error::config("ablation needs at least one row"));
    }
    if seeds.is_empty() {
        return Err(crate::error::Error::config("ablation needs at least one seed"));
    }
    let mut cells: Vec<(Option<f64>, u64)> = Vec::new();
    if include_ce {
        for &s in seeds {
            cells.push((None, s));
        }
    }
    for &sigma in sigmas {
        for &s in seeds {
            cells.push((Some(sigma), s));
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(sigma, seed)| run_cell(sigma, seed, data, setup))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut groups: Vec<Option<f64>> = Vec::new();
    if include_ce {
        groups.push(None);
    }
    groups.extend(sigmas.iter().map(|&s| Some(s)));
    for group in groups {
        let cells: Vec<&CellResult> = results.iter().filter(|c| c.sigma == group).collect();
        let (kstar_mean, kstar_std) =
            mean_std(&cells.iter().map(|c| c.kstar).collect::<Vec<_>>());
        let (acc_mean, acc_std) =
            mean_std(&cells.iter().map(|c| c.accuracy).collect::<Vec<_>>());
        let (ck_mean, ck_std) =
            mean_std(&cells.iter().map(|c| c.coteach_kstar).collect::<Vec<_>>());
        let (cacc_mean, cacc_std) =
            mean_std(&cells.iter().map(|c| c.coteach_accuracy).collect::<Vec<_>>());
        rows.push(AblationRow {
            sigma: group,
            runs: cells.len(),
            kstar_mean,
            kstar_std,
            acc_mean,
            acc_std,
            coteach_kstar_mean: ck_mean,
            coteach_kstar_std: ck_std,
            coteach_acc_mean: cacc_mean,
            coteach_acc_std: cacc_std,
        });
    }
    Ok(rows)
}

/// Render the table as CSV.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "sigma,runs,kstar_mean,kstar_std,acc_mean,acc_std,coteach_kstar_mean,coteach_kstar_std,coteach_acc_mean,coteach_acc_std\n",
    );
    for r in rows {
        let sigma = r
            .sigma
            .map(|s| format!("{s}"))
            .unwrap_or_else(|| "CE".to_string());
        out.push_str(&format!(
            "{sigma},{},{:.3},{:.3},{:.6},{:.6},{:.3},{:.3},{:.6},{:.6}\n",
            r.runs,
            r.kstar_mean,
            r.kstar_std,
            r.acc_mean,
            r.acc_std,
            r.coteach_kstar_mean,
            r.coteach_kstar_std,
            r.coteach_acc_mean,
            r.coteach_acc_std
        ));
    }
    out
}
