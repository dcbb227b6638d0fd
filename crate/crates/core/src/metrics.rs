//! Serializable run records. The metrics document embeds the fully resolved
//! configuration and seed so every result is auditable. Wall-clock time is
//! tracked in memory but kept out of the serialized document, which must be
//! bitwise identical across reruns of the same (config, seed).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection_purity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMetrics {
    pub seed: u64,
    /// Fully resolved configuration, embedded verbatim.
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub k_sweep: Vec<KSweepRow>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunMetrics {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        RunMetrics {
            seed,
            config,
            epochs: Vec::new(),
            k_sweep: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    /// Append a record, enforcing contiguous epoch indices from 0.
    pub fn push_epoch(&mut self, record: EpochRecord) -> Result<()> {
        if record.epoch != self.epochs.len() {
            return Err(Error::contract(format!(
                "epoch records must be contiguous from 0; got {} at position {}",
                record.epoch,
                self.epochs.len()
            )));
        }
        self.epochs.push(record);
        Ok(())
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Write a k-sweep table as CSV (`k,accuracy`).
pub fn save_k_sweep_csv(rows: &[KSweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "k,accuracy")?;
    for r in rows {
        writeln!(w, "{},{}", r.k, crate::data::fmt_f64_17(r.accuracy))?;
    }
    w.flush()?;
    Ok(())
}
