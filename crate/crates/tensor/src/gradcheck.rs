//! Central finite-difference verification of tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients element by element.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Error between two gradient estimates, relative to their magnitude but
/// floored at 1 so near-zero entries are judged absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh tape and the recorded input; it must return a scalar.
pub fn grad_check<Func, E>(f: Func, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport, E>
where
    Func: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |probe: Tensor<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let v = tape.param(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item()?)
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let numeric = Tensor::new(x.shape(), numeric)?;

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tol,
    })
}
