//! MLP container with optional nested-mask positions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::layer::Layer;

/// Ordered layer stack. `nested_positions` lists layer indices after whose
/// output the nested channel mask applies when a forward pass requests one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    nested_positions: BTreeSet<usize>,
}

/// Result of a training-mode forward pass: the output var plus tape vars for
/// every trainable parameter, aligned with [`Mlp::param_tensors_mut`].
/// Frozen batch-norm parameters appear as `None` (no gradient flows to them).
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Option<Var>>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, nested_positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let positions: BTreeSet<usize> = nested_positions.into_iter().collect();
        let mlp = Mlp {
            layers,
            nested_positions: positions,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    /// Check dimension chaining, per-layer invariants, and that all nested
    /// positions sit at one common feature width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("model must have at least one layer"));
        }
        let mut width = self.input_dim();
        let mut nested_width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => l.validate()?,
                Layer::BatchNorm(bn) => bn.validate()?,
                Layer::Relu => {}
            }
            width = layer.chain_width(width)?;
            if self.nested_positions.contains(&i) {
                match nested_width {
                    None => nested_width = Some(width),
                    Some(w) if w == width => {}
                    Some(w) => {
                        return Err(Error::contract(format!(
                            "nested positions disagree on width: {w} vs {width}"
                        )))
                    }
                }
            }
        }
        if let Some(&p) = self.nested_positions.iter().next_back() {
            if p >= self.layers.len() {
                return Err(Error::contract(format!(
                    "nested position {p} beyond last layer {}",
                    self.layers.len() - 1
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn nested_positions(&self) -> &BTreeSet<usize> {
        &self.nested_positions
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Linear(l) => Some(l.input_dim()),
                _ => None,
            })
            .unwrap_or(1)
    }

    pub fn output_dim(&self) -> usize {
        let mut width = self.input_dim();
        for l in &self.layers {
            width = l.chain_width(width).expect("validated model chains");
        }
        width
    }

    /// Channel count of the regularized representation, when the model has
    /// registered nested positions.
    pub fn nested_width(&self) -> Option<usize> {
        let &pos = self.nested_positions.iter().next()?;
        let mut width = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            width = l.chain_width(width).expect("validated model chains");
            if i == pos {
                return Some(width);
            }
        }
        None
    }

    /// Two models share an architecture if their layer shapes and nested
    /// positions agree (parameter values may differ).
    pub fn same_architecture(&self, other: &Mlp) -> bool {
        if self.nested_positions != other.nested_positions
            || self.layers.len() != other.layers.len()
        {
            return false;
        }
        self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
            (Layer::Linear(x), Layer::Linear(y)) => {
                x.input_dim() == y.input_dim() && x.output_dim() == y.output_dim()
            }
            (Layer::BatchNorm(x), Layer::BatchNorm(y)) => x.dim() == y.dim(),
            (Layer::Relu, Layer::Relu) => true,
            _ => false,
        })
    }

    /// Trainable tensors in a stable order: layers in sequence, weight before
    /// bias, gamma before beta. Checkpoints and optimizer state share this
    /// ordering.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Linear(l) => {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.param_tensors_mut() {
            t.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.input_dim();
        match *x.shape() {
            [_, c] if c == d => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "mlp forward",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            }),
        }
    }

    fn check_mask(&self, mask_k: Option<usize>) -> Result<()> {
        if let Some(k) = mask_k {
            match self.nested_width() {
                Some(width) if k >= 1 && k <= width => Ok(()),
                Some(width) => Err(Error::contract(format!(
                    "mask k={k} out of range [1, {width}]"
                ))),
                None => Err(Error::contract(
                    "mask requested but model has no nested position",
                )),
            }
        } else {
            Ok(())
        }
    }

    /// Training-mode forward. Batch norm uses batch statistics and updates
    /// running stats unless frozen. When `mask_k` is given, the nested mask
    /// is applied after each registered position.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mask_k: Option<usize>,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        self.check_mask(mask_k)?;
        let mut h = tape.leaf(x);
        let mut params: Vec<Option<Var>> = Vec::new();
        let positions = self.nested_positions.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Linear(l) => {
                    let (out, w, b) = l.forward(tape, h)?;
                    params.push(Some(w));
                    params.push(Some(b));
                    out
                }
                Layer::BatchNorm(bn) => {
                    if bn.frozen {
                        params.push(None);
                        params.push(None);
                        bn.forward_eval(tape, h)?
                    } else {
                        let (out, g, b) = bn.forward_train(tape, h)?;
                        params.push(Some(g));
                        params.push(Some(b));
                        out
                    }
                }
                Layer::Relu => tape.relu(h),
            };
            if let (true, Some(k)) = (positions.contains(&i), mask_k) {
                h = tape.prefix_mask(h, k)?;
            }
        }
        Ok(ForwardPass { output: h, params })
    }

    /// Evaluation-mode forward: running statistics for batch norm, nothing
    /// mutated, parameters enter the tape as constants.
    pub fn forward_eval(&self, tape: &mut Tape, x: &Tensor, mask_k: Option<usize>) -> Result<Var> {
        self.check_input(x)?;
        self.check_mask(mask_k)?;
        let mut h = tape.leaf(x);
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear(l) => {
                    let w = tape.constant(l.weight.shape().to_vec(), l.weight.data().to_vec());
                    let b = tape.constant(l.bias.shape().to_vec(), l.bias.data().to_vec());
                    tape.affine(h, w, b)?
                }
                Layer::BatchNorm(bn) => bn.forward_eval(tape, h)?,
                Layer::Relu => tape.relu(h),
            };
            if let (true, Some(k)) = (self.nested_positions.contains(&i), mask_k) {
                h = tape.prefix_mask(h, k)?;
            }
        }
        Ok(h)
    }

    /// Accumulate tape gradients into the parameter tensors after backward.
    pub fn write_grads(&mut self, tape: &Tape, pass: &ForwardPass) {
        for (var, tensor) in pass.params.iter().zip(self.param_tensors_mut()) {
            if let Some(v) = var {
                tape.write_grad(*v, tensor);
            }
        }
    }

    /// Deterministic batched inference: logits for `n` rows of `features`
    /// (row-major, `n * input_dim` values), optionally truncated at `mask_k`.
    pub fn logits(&self, features: &[f64], n: usize, mask_k: Option<usize>) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if features.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "logits",
                lhs: vec![features.len()],
                rhs: vec![n, d],
            });
        }
        let out_dim = self.output_dim();
        let mut out = Vec::with_capacity(n * out_dim);
        // Chunked to bound tape memory on large evaluation sets.
        const CHUNK: usize = 512;
        let mut row = 0;
        while row < n {
            let rows = CHUNK.min(n - row);
            let x = Tensor::matrix(rows, d, features[row * d..(row + rows) * d].to_vec())?;
            let mut tape = Tape::new();
            let y = self.forward_eval(&mut tape, &x, mask_k)?;
            out.extend_from_slice(tape.value(y));
            row += rows;
        }
        Ok(out)
    }
}

/// Mark every batch-norm layer frozen; a no-op for models without any.
pub fn freeze_batchnorm(model: &mut Mlp) {
    for layer in model.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            bn.frozen = true;
        }
    }
}
