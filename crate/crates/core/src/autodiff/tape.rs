//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node holds its
//! value and a local gradient rule; [`Tape::backward`] replays the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference previously created nodes. Gradients accumulate
//! directly into per-node buffers; inputs that do not require gradients are
//! skipped entirely.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out[m x n] = a[m x p] . b[p x n]
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        p: usize,
        n: usize,
    },
    /// out[m x n] = x[m x p] . w[p x n] + bias[n] per row (linear layer).
    Affine {
        x: Var,
        w: Var,
        bias: Var,
        m: usize,
        p: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    /// out[i][j] = x[i][j] + row[j]
    AddRow {
        x: Var,
        row: Var,
        rows: usize,
        cols: usize,
    },
    /// out[i][j] = x[i][j] * row[j]
    MulRow {
        x: Var,
        row: Var,
        rows: usize,
        cols: usize,
    },
    /// out[i][j] = x[i][j] * scale[j] + shift[j] with constant rows
    /// (frozen/eval batch norm). No gradient to scale/shift.
    RowAffine {
        x: Var,
        scale: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Keep feature columns [0, keep), zero the rest. Gradient is gated the
    /// same way: masked channels receive exactly zero.
    PrefixMask {
        x: Var,
        keep: usize,
        rows: usize,
        cols: usize,
    },
    /// Per-sample -log softmax(logits)[label]; saves the softmax table.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Scalar mean of squared differences.
    MeanSquaredError {
        pred: Var,
        target: Var,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    /// Batch normalization in training mode over the feature axis.
    /// Saves x_hat and the per-feature 1/sqrt(var + eps).
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// ---------------------------------------------------------------------------
// Dense kernels. Fixed accumulation order keeps results bitwise deterministic.
// ---------------------------------------------------------------------------

/// Fused multiply-add where the hardware has it; plain otherwise. The
/// branch folds at compile time.
#[inline(always)]
fn fma(a: f64, b: f64, c: f64) -> f64 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// c[m x n] += a[m x p] . b[p x n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = fma(aik, bv, *cv);
            }
        }
    }
}

/// Lane-unrolled dot product with a fixed combine order.
#[inline(always)]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (av, bv) in (&mut ac).zip(&mut bc) {
        for l in 0..4 {
            lanes[l] = fma(av[l], bv[l], lanes[l]);
        }
    }
    let mut tail = 0.0;
    for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
        tail = fma(av, bv, tail);
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// c[m x p] += a[m x n] . b[p x n]^T, as row dot products with a fixed
/// lane order, so results stay bitwise deterministic.
pub(crate) fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        let cr = &mut c[i * p..(i + 1) * p];
        for (k, cv) in cr.iter_mut().enumerate() {
            *cv += dot_lanes(ar, &b[k * n..(k + 1) * n]);
        }
    }
}

/// c[p x n] += a[m x p]^T . b[m x n]; row-contiguous inner loop.
pub(crate) fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), p * n);
    for i in 0..m {
        let ar = &a[i * p..(i + 1) * p];
        let br = &b[i * n..(i + 1) * n];
        for (k, &aik) in ar.iter().enumerate() {
            let cr = &mut c[k * n..(k + 1) * n];
            for (cv, &bv) in cr.iter_mut().zip(br) {
                *cv = fma(aik, bv, *cv);
            }
        }
    }
}

/// Numerically stable per-row softmax of `logits` [rows x cols].
pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut probs = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut probs[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for (o, &l) in out.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    probs
}

fn add_assign(buf: &mut [f64], g: &[f64]) {
    for (o, &v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass, if one flowed to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Register a tensor as a leaf; data is copied onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Register a non-differentiable constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.nodes[v.0].shape {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // -- Primitive operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "matmul")?;
        let (p2, n) = self.dims2(b, "matmul")?;
        if p != p2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            m,
            p,
            n,
        );
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, p, n }))
    }

    /// Fused linear layer: x . w plus a broadcast bias row.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, p) = self.dims2(x, "affine")?;
        let (p2, n) = self.dims2(w, "affine")?;
        if p != p2 || self.nodes[bias.0].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].copy_from_slice(bv);
        }
        matmul_acc(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &mut out,
            m,
            p,
            n,
        );
        let rg = self.needs_grad(&[x, w, bias]);
        Ok(self.push(vec![m, n], out, rg, Op::Affine { x, w, bias, m, p, n }))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| c * v).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::Relu { x })
    }

    /// Broadcast-add a row vector over every row of a matrix (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_row")?;
        if self.nodes[row.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let rv = &self.nodes[row.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..rows {
            for (o, &r) in out[i * cols..(i + 1) * cols].iter_mut().zip(rv) {
                *o += r;
            }
        }
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(vec![rows, cols], out, rg, Op::AddRow { x, row, rows, cols }))
    }

    /// Broadcast-multiply a row vector over every row of a matrix.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mul_row")?;
        if self.nodes[row.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let rv = &self.nodes[row.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..rows {
            for (o, &r) in out[i * cols..(i + 1) * cols].iter_mut().zip(rv) {
                *o *= r;
            }
        }
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(vec![rows, cols], out, rg, Op::MulRow { x, row, rows, cols }))
    }

    /// Fused per-feature affine with constant coefficients (frozen/eval batch
    /// norm): out[i][j] = x[i][j] * scale[j] + shift[j]. Gradient flows to x
    /// only.
    pub fn row_affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "row_affine")?;
        if scale.len() != cols || shift.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "row_affine",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![scale.len()],
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let xr = &xv[i * cols..(i + 1) * cols];
            let or = &mut out[i * cols..(i + 1) * cols];
            for ((o, &xx), (&s, &sh)) in or.iter_mut().zip(xr).zip(scale.iter().zip(&shift)) {
                *o = xx * s + sh;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            vec![rows, cols],
            out,
            rg,
            Op::RowAffine {
                x,
                scale,
                rows,
                cols,
            },
        ))
    }

    /// Zero all feature channels with index >= keep. Accepts a vector
    /// (single sample) or a matrix (mask applied per row).
    pub fn prefix_mask(&mut self, x: Var, keep: usize) -> Result<Var> {
        let (rows, cols) = match *self.nodes[x.0].shape {
            [n] => (1, n),
            [r, c] => (r, c),
            ref s => {
                return Err(Error::ShapeMismatch {
                    op: "prefix_mask",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if keep == 0 || keep > cols {
            return Err(Error::contract(format!(
                "prefix_mask keep={keep} out of range [1, {cols}]"
            )));
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..rows {
            for o in out[i * cols + keep..(i + 1) * cols].iter_mut() {
                *o = 0.0;
            }
        }
        let rg = self.needs_grad(&[x]);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::PrefixMask { x, keep, rows, cols }))
    }

    /// Per-sample cross entropy from raw logits [n x C]; returns a vector of
    /// n losses. Log-sum-exp is computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![labels.len()],
            });
        }
        if rows == 0 {
            return Err(Error::contract("softmax_cross_entropy on empty batch"));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: cols,
                });
            }
        }
        let lv = &self.nodes[logits.0].value;
        let mut losses = vec![0.0; rows];
        let mut probs = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &lv[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for (o, &l) in prow.iter_mut().zip(row) {
                *o = (l - max).exp();
                sum += *o;
            }
            for o in prow.iter_mut() {
                *o /= sum;
            }
            let lse = max + sum.ln();
            losses[i] = lse - row[labels[i]];
        }
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![rows],
            losses,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                rows,
                cols,
            },
        ))
    }

    /// Scalar mean of squared differences. Shapes may differ as long as the
    /// element counts agree (e.g. an [n x 1] prediction against an [n] target).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let np = self.nodes[pred.0].value.len();
        let nt = self.nodes[target.0].value.len();
        if np != nt {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let sum: f64 = self.nodes[pred.0]
            .value
            .iter()
            .zip(&self.nodes[target.0].value)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.needs_grad(&[pred, target]);
        Ok(self.push(
            vec![1],
            vec![sum / np as f64],
            rg,
            Op::MeanSquaredError { pred, target },
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![m], rg, Op::Mean { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Batch normalization over the feature (column) axis in training mode,
    /// using biased batch variance. Returns (output, batch_mean, batch_var).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (rows, cols) = self.dims2(x, "batch_norm")?;
        if self.nodes[gamma.0].shape != [cols] || self.nodes[beta.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![rows, cols],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        if rows < 2 {
            return Err(Error::contract(
                "batch_norm in training mode requires batch size >= 2",
            ));
        }
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            add_assign(&mut mean, &xv[i * cols..(i + 1) * cols]);
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (j, vj) in var.iter_mut().enumerate() {
                let d = xv[i * cols + j] - mean[j];
                *vj += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                x_hat[i * cols + j] = (xv[i * cols + j] - mean[j]) * inv_std[j];
            }
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = gv[j] * x_hat[i * cols + j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        let v = self.push(
            vec![rows, cols],
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                rows,
                cols,
            },
        );
        Ok((v, mean, var))
    }

    // -- Backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits every recorded node exactly
    /// once, in reverse creation order. Internal gradient buffers are reset
    /// at the start of each call; accumulation across backward passes happens
    /// in the [`Tensor`] via [`Tape::write_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            Self::backward_node(nodes, grads, idx, &g);
            grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first touch; `None` when `v`
    /// does not require gradients.
    fn buf_of<'a>(
        nodes: &[Node],
        grads: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let n = nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, p, n } => {
                if nodes[a.0].requires_grad {
                    // dA += g . B^T
                    let bv = &nodes[b.0].value;
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * p]);
                    matmul_abt_acc(g, bv, buf, m, n, p);
                }
                if nodes[b.0].requires_grad {
                    // dB += A^T . g
                    let av = &nodes[a.0].value;
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; p * n]);
                    matmul_atb_acc(av, g, buf, m, p, n);
                }
            }
            &Op::Affine { x, w, bias, m, p, n } => {
                if nodes[x.0].requires_grad {
                    let wv = &nodes[w.0].value;
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; m * p]);
                    matmul_abt_acc(g, wv, buf, m, n, p);
                }
                if nodes[w.0].requires_grad {
                    let xv = &nodes[x.0].value;
                    let buf = grads[w.0].get_or_insert_with(|| vec![0.0; p * n]);
                    matmul_atb_acc(xv, g, buf, m, p, n);
                }
                if let Some(buf) = Self::buf_of(nodes, grads, bias) {
                    for i in 0..m {
                        add_assign(buf, &g[i * n..(i + 1) * n]);
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(buf) = Self::buf_of(nodes, grads, a) {
                    add_assign(buf, g);
                }
                if let Some(buf) = Self::buf_of(nodes, grads, b) {
                    add_assign(buf, g);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(buf) = Self::buf_of(nodes, grads, a) {
                    add_assign(buf, g);
                }
                if let Some(buf) = Self::buf_of(nodes, grads, b) {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if nodes[a.0].requires_grad {
                    let bv = &nodes[b.0].value;
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; bv.len()]);
                    for ((o, &gv), &vb) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * vb;
                    }
                }
                if nodes[b.0].requires_grad {
                    let av = &nodes[a.0].value;
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; av.len()]);
                    for ((o, &gv), &va) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * va;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(buf) = Self::buf_of(nodes, grads, x) {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            &Op::Relu { x } => {
                // Subgradient at exactly 0 is taken as 0.
                if nodes[x.0].requires_grad {
                    let xv = &nodes[x.0].value;
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                    for ((o, &gv), &xx) in buf.iter_mut().zip(g).zip(xv) {
                        if xx > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::AddRow { x, row, rows, cols } => {
                if let Some(buf) = Self::buf_of(nodes, grads, x) {
                    add_assign(buf, g);
                }
                if let Some(buf) = Self::buf_of(nodes, grads, row) {
                    for i in 0..rows {
                        add_assign(buf, &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            &Op::MulRow { x, row, rows, cols } => {
                if nodes[x.0].requires_grad {
                    let rv = &nodes[row.0].value;
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for i in 0..rows {
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        for ((o, &gv), &r) in br.iter_mut().zip(gr).zip(rv) {
                            *o += gv * r;
                        }
                    }
                }
                if nodes[row.0].requires_grad {
                    let xv = &nodes[x.0].value;
                    let buf = grads[row.0].get_or_insert_with(|| vec![0.0; cols]);
                    for i in 0..rows {
                        let xr = &xv[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        for ((o, &gv), &xx) in buf.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xx;
                        }
                    }
                }
            }
            Op::RowAffine {
                x,
                scale,
                rows,
                cols,
            } => {
                let (x, rows, cols) = (*x, *rows, *cols);
                if nodes[x.0].requires_grad {
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for i in 0..rows {
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        for ((o, &gv), &s) in br.iter_mut().zip(gr).zip(scale) {
                            *o += gv * s;
                        }
                    }
                }
            }
            &Op::PrefixMask { x, keep, rows, cols } => {
                if let Some(buf) = Self::buf_of(nodes, grads, x) {
                    for i in 0..rows {
                        add_assign(
                            &mut buf[i * cols..i * cols + keep],
                            &g[i * cols..i * cols + keep],
                        );
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                rows,
                cols,
            } => {
                let (logits, rows, cols) = (*logits, *rows, *cols);
                if nodes[logits.0].requires_grad {
                    let buf = grads[logits.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for i in 0..rows {
                        let gi = g[i];
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        let pr = &probs[i * cols..(i + 1) * cols];
                        for (o, &p) in br.iter_mut().zip(pr) {
                            *o += gi * p;
                        }
                        br[labels[i]] -= gi;
                    }
                }
            }
            &Op::MeanSquaredError { pred, target } => {
                let n = nodes[pred.0].value.len() as f64;
                let gs = g[0];
                if nodes[pred.0].requires_grad {
                    let pv = &nodes[pred.0].value;
                    let tv = &nodes[target.0].value;
                    let buf = grads[pred.0].get_or_insert_with(|| vec![0.0; pv.len()]);
                    for ((o, &p), &t) in buf.iter_mut().zip(pv).zip(tv) {
                        *o += gs * 2.0 * (p - t) / n;
                    }
                }
                if nodes[target.0].requires_grad {
                    let pv = &nodes[pred.0].value;
                    let tv = &nodes[target.0].value;
                    let buf = grads[target.0].get_or_insert_with(|| vec![0.0; tv.len()]);
                    for ((o, &p), &t) in buf.iter_mut().zip(pv).zip(tv) {
                        *o -= gs * 2.0 * (p - t) / n;
                    }
                }
            }
            &Op::Mean { x } => {
                if let Some(buf) = Self::buf_of(nodes, grads, x) {
                    let gs = g[0] / buf.len() as f64;
                    for o in buf.iter_mut() {
                        *o += gs;
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(buf) = Self::buf_of(nodes, grads, x) {
                    let gs = g[0];
                    for o in buf.iter_mut() {
                        *o += gs;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                rows,
                cols,
            } => {
                let (x, gamma, beta, rows, cols) = (*x, *gamma, *beta, *rows, *cols);
                let gv = &nodes[gamma.0].value;
                // Per-feature sums of dy and dy * x_hat.
                let mut sum_dy = vec![0.0; cols];
                let mut sum_dy_xhat = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let d = g[i * cols + j];
                        sum_dy[j] += d;
                        sum_dy_xhat[j] += d * x_hat[i * cols + j];
                    }
                }
                if nodes[x.0].requires_grad {
                    // dx = inv_std/m * (m*dxhat - sum(dxhat) - x_hat*sum(dxhat*x_hat))
                    // with dxhat = dy * gamma, per feature column.
                    let m = rows as f64;
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                    for i in 0..rows {
                        for j in 0..cols {
                            let dxhat = g[i * cols + j] * gv[j];
                            buf[i * cols + j] += inv_std[j] / m
                                * (m * dxhat
                                    - gv[j] * sum_dy[j]
                                    - x_hat[i * cols + j] * gv[j] * sum_dy_xhat[j]);
                        }
                    }
                }
                if let Some(buf) = Self::buf_of(nodes, grads, gamma) {
                    add_assign(buf, &sum_dy_xhat);
                }
                if let Some(buf) = Self::buf_of(nodes, grads, beta) {
                    add_assign(buf, &sum_dy);
                }
            }
        }
    }

    /// Accumulate the gradient of `v` into `t.grad`. Repeated backward +
    /// write_grad cycles without zeroing accumulate, matching SGD semantics.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grads[v.0].as_deref() {
            t.accumulate_grad(g);
        } else if t.requires_grad {
            // Gradient never flowed to this leaf; contribute exact zeros so
            // every requires_grad tensor ends the pass with a populated grad.
            t.accumulate_grad(&vec![0.0; t.len()]);
        }
    }
}
