//! Central-difference gradient verification.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued tensor function against
/// a central finite-difference estimate at every coordinate of every input
/// with `requires_grad`, and return the worst relative error
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// The numeric side re-runs the forward pass on a fresh tape for each
/// perturbation, so it stays independent of the backward implementation
/// it is checking.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check requires eps > 0"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval_at = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut perturbed: Vec<Tensor> = inputs.to_vec();
        perturbed[which].data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut max_err: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        for c in 0..t.len() {
            let plus = eval_at(ti, c, eps)?;
            let minus = eval_at(ti, c, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][c];
            let err = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
