//! Command-line surface: dataset generation, the two training stages,
//! evaluation, truncation sweeps, the toy regression experiment, and the
//! sigma ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use noiselab::checkpoint::{load_checkpoint, save_checkpoint};
use noiselab::config::FileConfig;
use noiselab::data::{
    gen_gaussian_blobs, inject_pairflip_noise, inject_symmetric_noise, load_classification_csv,
    save_classification_csv, save_regression_csv, split, SplitSpec,
};
use noiselab::error::{Error, Result};
use noiselab::metrics::{save_k_sweep_csv, KSweepRow};
use noiselab::nested::{accuracy_at, find_optimal_k, sweep_truncation};
use noiselab::pipeline::{
    ablation_csv, build_classifier_mlp, ensemble_accuracy, run_ablation, run_toy_experiment,
    train_stage1, train_stage2, SplitData,
};
use noiselab::plot::write_toy_plot;
use noiselab::seeds::{derive_seed, stream_rng, STREAM_INIT};

#[derive(Parser)]
#[command(
    name = "noiselab",
    version,
    about = "Label-noise training laboratory: ordered representations + peer sample selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write train/val/test CSV splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the data seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: pretrain a single model; writes checkpoint and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Override the stage-one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override sigma_nest.
        #[arg(long)]
        sigma: Option<f64>,
        /// Disable nested masking (plain cross-entropy baseline).
        #[arg(long)]
        no_nested: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: co-teaching fine-tune from two stage-one checkpoints.
    Coteach {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Override the stage-two seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ckpt1: PathBuf,
        #[arg(long)]
        ckpt2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a dataset CSV, optionally truncated at k.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset CSV (classification layout).
        #[arg(long)]
        data: PathBuf,
        /// Truncation depth; full channels when omitted.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Accuracy for every truncation depth k = 1..K; reports k*.
    SweepK {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// The noisy regression experiment: predictions table, metrics, SVG plot.
    Toy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sigma ablation table over (sigma, seed) cells.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(args: &ConfigArgs) -> Result<FileConfig> {
    match &args.config {
        Some(path) => FileConfig::load(path),
        None => Ok(FileConfig::default()),
    }
}

fn load_split_dir(dir: &Path) -> Result<SplitData> {
    Ok(SplitData {
        train: load_classification_csv(dir.join("train.csv"))?,
        val: load_classification_csv(dir.join("val.csv"))?,
        test: load_classification_csv(dir.join("test.csv"))?,
    })
}

fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    // Wall clock lives beside the metrics, never inside them: metrics files
    // must be bitwise identical across reruns.
    std::fs::write(dir.join("timing.txt"), format!("wall_clock_seconds={seconds:.3}\n"))?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let d = &cfg.data;
            let n = d.n_train + d.n_val + d.n_test;
            let clean = gen_gaussian_blobs(
                n,
                d.classes,
                d.dim,
                d.separation,
                derive_seed(d.seed, 0),
            )?;
            let spec = SplitSpec::from_counts(d.n_train, d.n_val, d.n_test, derive_seed(d.seed, 1))?;
            let (train, val, test) = split(&clean, &spec)?;
            let train = match d.noise.as_str() {
                "none" => train,
                "symmetric" => inject_symmetric_noise(&train, d.noise_rate, derive_seed(d.seed, 2))?,
                "pairflip" => inject_pairflip_noise(&train, d.noise_rate, derive_seed(d.seed, 2))?,
                other => return Err(Error::config(format!("unknown noise kind {other:?}"))),
            };
            std::fs::create_dir_all(&out)?;
            save_classification_csv(&train, out.join("train.csv"))?;
            save_classification_csv(&val, out.join("val.csv"))?;
            save_classification_csv(&test, out.join("test.csv"))?;
            println!(
                "wrote {} train / {} val / {} test samples (clean fraction {:.4}) to {}",
                train.len(),
                val.len(),
                test.len(),
                train.clean_fraction(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            config,
            data,
            seed,
            sigma,
            no_nested,
            out,
        } => {
            let started = Instant::now();
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.stage1.seed = s;
            }
            if let Some(s) = sigma {
                cfg.nested.sigma_nest = s;
            }
            if no_nested {
                cfg.nested.enabled = false;
            }
            cfg.validate()?;
            let splits = load_split_dir(&data)?;
            let stage1 = cfg.stage1_config()?;
            let mut init_rng = stream_rng(stage1.seed, STREAM_INIT);
            let mut model = build_classifier_mlp(
                splits.train.dim(),
                cfg.model.hidden,
                cfg.model.feature_width,
                splits.train.class_count(),
                cfg.model.batch_norm,
                &mut init_rng,
            );
            let mut metrics = train_stage1(
                &mut model,
                &splits.train,
                Some(&splits.val),
                Some(&splits.test),
                &stage1,
            )?;
            metrics.wall_clock_seconds = started.elapsed().as_secs_f64();
            std::fs::create_dir_all(&out)?;
            save_checkpoint(out.join("checkpoint.json"), &model, None)?;
            metrics.save_json(out.join("metrics.json"))?;
            write_timing(&out, metrics.wall_clock_seconds)?;
            if let Some(last) = metrics.last_epoch() {
                println!(
                    "stage1 done: train_loss={:.4} val_acc={} test_acc={}",
                    last.train_loss,
                    last.val_accuracy.map(|v| format!("{v:.4}")).unwrap_or_default(),
                    last.test_accuracy.map(|v| format!("{v:.4}")).unwrap_or_default(),
                );
            }
            Ok(())
        }

        Command::Coteach {
            config,
            data,
            seed,
            ckpt1,
            ckpt2,
            out,
        } => {
            let started = Instant::now();
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.stage2.seed = s;
            }
            cfg.validate()?;
            let splits = load_split_dir(&data)?;
            let stage2 = cfg.stage2_config()?;
            let mut m1 = load_checkpoint(&ckpt1)?.model;
            let mut m2 = load_checkpoint(&ckpt2)?.model;
            let mut metrics = train_stage2(
                &mut m1,
                &mut m2,
                &splits.train,
                Some(&splits.val),
                Some(&splits.test),
                &stage2,
            )?;
            metrics.wall_clock_seconds = started.elapsed().as_secs_f64();
            std::fs::create_dir_all(&out)?;
            save_checkpoint(out.join("checkpoint1.json"), &m1, None)?;
            save_checkpoint(out.join("checkpoint2.json"), &m2, None)?;
            metrics.save_json(out.join("metrics.json"))?;
            write_timing(&out, metrics.wall_clock_seconds)?;

            // Final report: ensemble at full channels, and at fresh validated
            // truncation depths when masking was configured.
            let full = ensemble_accuracy(&m1, &m2, &splits.test, None, None)?;
            let summary = if stage2.nested.is_some() {
                let (k1, _) = find_optimal_k(&m1, &splits.val)?;
                let (k2, _) = find_optimal_k(&m2, &splits.val)?;
                let at_kstar = ensemble_accuracy(&m1, &m2, &splits.test, Some(k1), Some(k2))?;
                serde_json::json!({
                    "ensemble_test_accuracy_full": full,
                    "kstar1": k1,
                    "kstar2": k2,
                    "ensemble_test_accuracy_kstar": at_kstar,
                })
            } else {
                serde_json::json!({ "ensemble_test_accuracy_full": full })
            };
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            println!("stage2 done: ensemble_test_acc_full={full:.4}");
            Ok(())
        }

        Command::Eval { ckpt, data, k } => {
            if let Some(0) = k {
                return Err(Error::config("k must be >= 1"));
            }
            let model = load_checkpoint(&ckpt)?.model;
            let ds = load_classification_csv(&data)?;
            let acc = accuracy_at(&model, &ds, k)?;
            match k {
                Some(k) => println!("accuracy@k={k}: {acc:.6}"),
                None => println!("accuracy@full: {acc:.6}"),
            }
            Ok(())
        }

        Command::SweepK { ckpt, data, out } => {
            let model = load_checkpoint(&ckpt)?.model;
            let ds = load_classification_csv(&data)?;
            let table = sweep_truncation(&model, &ds)?;
            let rows: Vec<KSweepRow> = table
                .iter()
                .map(|&(k, accuracy)| KSweepRow { k, accuracy })
                .collect();
            save_k_sweep_csv(&rows, &out)?;
            let (kstar, acc) = find_optimal_k(&model, &ds)?;
            println!("k*={kstar} accuracy={acc:.6} ({} depths swept)", rows.len());
            Ok(())
        }

        Command::Toy { config, seed, out } => {
            let started = Instant::now();
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.toy.seed = s;
            }
            cfg.validate()?;
            let outcome = run_toy_experiment(&cfg.toy_config()?)?;
            std::fs::create_dir_all(&out)?;

            // Prediction table: x, noisy y, truth, one column per curve.
            let ds = &outcome.dataset;
            let mut csv = String::from("x,y_noisy,truth");
            for c in &outcome.curves {
                csv.push(',');
                csv.push_str(&c.label.replace(' ', "_").replace('=', ""));
            }
            csv.push('\n');
            for i in 0..ds.len() {
                use noiselab::data::fmt_f64_17 as f;
                csv.push_str(&format!("{},{},{}", f(ds.x()[i]), f(ds.y()[i]), f(ds.truth()[i])));
                for c in &outcome.curves {
                    csv.push(',');
                    csv.push_str(&f(c.predictions[i]));
                }
                csv.push('\n');
            }
            std::fs::write(out.join("toy_predictions.csv"), csv)?;
            save_regression_csv(ds, out.join("toy_dataset.csv"))?;
            std::fs::write(
                out.join("toy_metrics.json"),
                serde_json::to_string_pretty(&outcome)? + "\n",
            )?;
            write_toy_plot(&outcome, out.join("toy_plot.svg"))?;
            write_timing(&out, started.elapsed().as_secs_f64())?;
            for c in &outcome.curves {
                println!("{}: mse_to_truth={:.4}", c.label, c.mse_to_truth);
            }
            Ok(())
        }

        Command::Ablate { config, data, out } => {
            let started = Instant::now();
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let splits = load_split_dir(&data)?;
            let setup = cfg.ablation_setup()?;
            let rows = run_ablation(
                &cfg.ablate.sigmas,
                cfg.ablate.include_ce,
                &cfg.ablate.seeds,
                &splits,
                &setup,
            )?;
            std::fs::create_dir_all(&out)?;
            let table = ablation_csv(&rows);
            std::fs::write(out.join("ablation.csv"), &table)?;
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&rows)? + "\n",
            )?;
            write_timing(&out, started.elapsed().as_secs_f64())?;
            print!("{table}");
            Ok(())
        }
    }
}
