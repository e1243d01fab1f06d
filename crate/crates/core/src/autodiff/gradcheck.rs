//! Central-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of one [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over elements of |analytic − numeric| / max(1, |numeric|).
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Kink margin of the graph at the unperturbed input.
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_scalar<F>(f: &F, input: Tensor) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.constant(input);
    let out = f(&g, x)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.dims()));
    }
    Ok(v.data()[0])
}

/// Compares the gradient of the scalar function `f` at `input` with central
/// differences of step `h`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {h}")));
    }
    let g = Graph::new();
    let x = g.param(input.clone());
    let loss = f(&g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x).unwrap_or_else(|| vec![0.0; input.len()]);
    let kink_margin = g.kink_margin();

    let mut worst = (0.0, 0);
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheck { max_rel_err: worst.0, worst_index: worst.1, kink_margin })
}
