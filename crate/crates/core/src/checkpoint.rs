//! Model checkpoints: structured JSON holding the full layer stack
//! (shapes and flat parameter arrays, batch-norm buffers, frozen flags)
//! plus optimizer velocity. Floats are emitted in shortest round-trip form,
//! so save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, SgdState};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: Mlp,
    /// Momentum buffers aligned with the model's parameter order; empty when
    /// the checkpoint carries no optimizer state.
    pub velocity: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn optimizer_state(&self) -> Option<SgdState> {
        if self.velocity.is_empty() {
            None
        } else {
            Some(SgdState::from_velocity(self.velocity.clone()))
        }
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Mlp,
    opt: Option<&SgdState>,
) -> Result<()> {
    for t in model.param_tensors() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(
                "refusing to save non-finite parameters".into(),
            ));
        }
    }
    let ckpt = Checkpoint {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        velocity: opt.map(|s| s.velocity().to_vec()).unwrap_or_default(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &ckpt)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            ckpt.format_version
        )));
    }
    ckpt.model.validate()?;
    if !ckpt.velocity.is_empty() {
        let params = ckpt.model.param_tensors();
        if ckpt.velocity.len() != params.len()
            || ckpt
                .velocity
                .iter()
                .zip(&params)
                .any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::Checkpoint(
                "optimizer state does not match model parameters".into(),
            ));
        }
    }
    Ok(ckpt)
}
