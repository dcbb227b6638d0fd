//! Single SGD updates shared by the stage-one trainer and the co-teaching
//! update passes. Keeping one code path makes the degenerate-forget-rate
//! equivalence hold bitwise.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::mlp::Mlp;
use crate::nn::optim::{sgd_step, SgdState};

/// Location of a step inside a run, for diagnostics only.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepAt {
    pub epoch: usize,
    pub iter: usize,
}

/// One mini-batch update under mean per-sample cross entropy.
/// Returns the batch training loss. A non-finite loss aborts before any
/// parameter is touched.
pub fn train_step_class(
    model: &mut Mlp,
    opt: &mut SgdState,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
    x: &Tensor,
    labels: &[usize],
    mask_k: Option<usize>,
    at: StepAt,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward_train(&mut tape, x, mask_k)?;
    let losses = tape.softmax_cross_entropy(pass.output, labels)?;
    let loss = tape.mean(losses);
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: at.epoch,
            iter: at.iter,
        });
    }
    model.zero_grads();
    tape.backward(loss)?;
    model.write_grads(&tape, &pass);
    let mut params = model.param_tensors_mut();
    sgd_step(&mut params, opt, momentum, weight_decay, lr)?;
    Ok(value)
}

/// One full-batch update under mean squared error (regression).
pub fn train_step_mse(
    model: &mut Mlp,
    opt: &mut SgdState,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
    x: &Tensor,
    targets: &Tensor,
    mask_k: Option<usize>,
    at: StepAt,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward_train(&mut tape, x, mask_k)?;
    let target = tape.leaf(targets);
    let loss = tape.mse(pass.output, target)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: at.epoch,
            iter: at.iter,
        });
    }
    model.zero_grads();
    tape.backward(loss)?;
    model.write_grads(&tape, &pass);
    let mut params = model.param_tensors_mut();
    sgd_step(&mut params, opt, momentum, weight_decay, lr)?;
    Ok(value)
}

/// Per-sample cross-entropy losses in evaluation mode (running batch-norm
/// statistics, no mutation, no gradients). Used for small-loss selection.
pub fn eval_losses(
    model: &Mlp,
    x: &Tensor,
    labels: &[usize],
    mask_k: Option<usize>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, x, mask_k)?;
    let losses = tape.softmax_cross_entropy(out, labels)?;
    Ok(tape.value(losses).to_vec())
}
