//! Central finite-difference oracle for backward rules.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator guard in the relative error.
pub const REL_EPS: f64 = 1e-12;

/// Max over elements of `|analytic - numeric| / (|analytic| + 1e-12)` where
/// `numeric` is the central difference `(f(x+h e) - f(x-h e)) / 2h`.
///
/// `f` must be deterministic and return a scalar.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, h, &all)
}

/// [`finite_difference_check`] restricted to the given flat indices.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let out = f(leaf)?;
        let grads = tape.backward(out)?;
        grads
            .wrt(&leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()).expect("shape of x"))
    };
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        f(tape.constant(t))?.value().item()
    };
    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + REL_EPS));
    }
    Ok(worst)
}
