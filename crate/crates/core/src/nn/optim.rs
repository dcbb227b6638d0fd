//! SGD with momentum and coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::mlp::Mlp;
use crate::nn::schedule::LrSchedule;

/// Optimizer hyper-parameters. The schedule owns the base learning rate;
/// [`sgd_step`] itself takes the already-resolved rate so stepping stays
/// decoupled from scheduling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl SgdConfig {
    pub fn new(momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        let cfg = SgdConfig {
            momentum,
            weight_decay,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        self.schedule.validate()
    }

    pub fn base_lr(&self) -> f64 {
        self.schedule.base_lr
    }
}

/// Per-parameter velocity buffers, aligned with [`Mlp::param_tensors_mut`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_model(model: &Mlp) -> Self {
        SgdState {
            velocity: model.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn from_velocity(velocity: Vec<Vec<f64>>) -> Self {
        SgdState { velocity }
    }
}

/// One SGD update:
/// `v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v`.
///
/// Parameters whose gradient is unpopulated (frozen batch norm) are skipped
/// entirely, leaving both the parameter and its velocity untouched.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    state: &mut SgdState,
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "optimizer state holds {} buffers for {} params",
            state.velocity.len(),
            params.len()
        )));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::contract(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for (t, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if v.len() != t.len() {
            return Err(Error::contract(format!(
                "velocity buffer length {} does not match param length {}",
                v.len(),
                t.len()
            )));
        }
        let (data, grad) = t.data_and_grad_mut();
        let Some(grad) = grad else {
            continue;
        };
        for ((p, vel), &g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = momentum * *vel + (g + weight_decay * *p);
            *p -= lr * *vel;
        }
    }
    Ok(())
}
