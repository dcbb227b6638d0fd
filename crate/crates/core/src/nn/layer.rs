//! Individual layers: linear, relu, 1-d batch normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer; weight is stored [input x output].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Initialize weight and bias uniformly in +-sqrt(1/fan_in).
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        let weight: Vec<f64> = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..output).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::matrix(input, output, weight)
                .expect("linear weight shape")
                .with_grad(),
            bias: Tensor::vector(bias).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.shape().len() != 2 {
            return Err(Error::contract("linear weight must be a matrix"));
        }
        if self.bias.shape() != [self.output_dim()] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.weight.shape().to_vec(),
                rhs: self.bias.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let out = tape.affine(x, w, b)?;
        Ok((out, w, b))
    }
}

/// Batch normalization over the feature axis of an [n x d] activation.
///
/// Running statistics follow the convention
/// `running <- (1 - momentum) * running + momentum * batch_stat`, with the
/// unbiased batch variance feeding the running variance. While `frozen`, a
/// training step changes none of gamma, beta, running_mean, running_var.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::vector(vec![1.0; dim]).with_grad(),
            beta: Tensor::vector(vec![0.0; dim]).with_grad(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.beta.len() != d || self.running_mean.len() != d || self.running_var.len() != d {
            return Err(Error::contract("batch norm buffers disagree on dimension"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!(
                "batch norm momentum must be in (0,1), got {}",
                self.momentum
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("batch norm eps must be > 0"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("running variance must be nonnegative"));
        }
        Ok(())
    }

    /// Training-mode forward: batch statistics, running stats updated.
    /// Returns the output plus the gamma/beta tape vars for gradient mapping.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let (out, mean, var) = tape.batch_norm(x, g, b, self.eps)?;
        let m = tape.shape(out)[0] as f64;
        let unbias = m / (m - 1.0);
        for (r, &v) in self.running_mean.iter_mut().zip(&mean) {
            *r = (1.0 - self.momentum) * *r + self.momentum * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&var) {
            *r = (1.0 - self.momentum) * *r + self.momentum * (v * unbias);
        }
        Ok((out, g, b))
    }

    /// Evaluation-mode forward: running statistics, nothing mutated, no
    /// gradient to gamma/beta (they enter as constants), gradient still
    /// flows to the input.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let scale: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift: Vec<f64> = self
            .beta
            .data()
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        tape.row_affine(x, scale, shift)
    }
}

/// Apply batch normalization with the stated mode. In training mode with an
/// unfrozen layer, batch statistics are used and running stats updated;
/// otherwise running statistics are used and nothing is mutated.
pub fn batchnorm_forward(
    bn: &mut BatchNorm1d,
    tape: &mut Tape,
    x: Var,
    training: bool,
) -> Result<Var> {
    if training && !bn.frozen {
        bn.forward_train(tape, x).map(|(out, _, _)| out)
    } else {
        bn.forward_eval(tape, x)
    }
}

/// One element of an MLP stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm1d),
    Relu,
}

impl Layer {
    /// Output width given the incoming width, or an error if they cannot chain.
    pub fn chain_width(&self, incoming: usize) -> Result<usize> {
        match self {
            Layer::Linear(l) => {
                if l.input_dim() != incoming {
                    return Err(Error::ShapeMismatch {
                        op: "layer chain",
                        lhs: vec![incoming],
                        rhs: vec![l.input_dim(), l.output_dim()],
                    });
                }
                Ok(l.output_dim())
            }
            Layer::BatchNorm(bn) => {
                if bn.dim() != incoming {
                    return Err(Error::ShapeMismatch {
                        op: "layer chain",
                        lhs: vec![incoming],
                        rhs: vec![bn.dim()],
                    });
                }
                Ok(incoming)
            }
            Layer::Relu => Ok(incoming),
        }
    }
}
