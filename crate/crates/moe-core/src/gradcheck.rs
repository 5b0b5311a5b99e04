//! Central-difference validation of reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for a
/// scalar-valued function of one tensor.
///
/// The analytic side runs one backward pass; the numerical side evaluates
/// the function at `x[i] ± step` per coordinate. A function that blocks its
/// own gradient (for example through a stop-gradient marker) reports a
/// large error here by design: the analytic zero disagrees with the
/// nonzero difference quotient.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let var = tape.param(x.clone());
    let loss = f(&tape, var)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt_or_zeros(var);

    let eval = |point: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.param(point.clone());
        f(&t, v)?.scalar_value()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
