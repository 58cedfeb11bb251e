//! Central finite-difference gradient checking.

use crate::error::{ensure, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs; the error is the maximum over all
/// components of all inputs.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(
        (1e-6..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-6, 1e-3]"
    );
    let inputs: Vec<Tensor> = xs.iter().map(|x| x.clone().with_grad()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::numeric("grad_check", format!("f(x) = {value}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.leaf(x)).collect();
        let r = f(&mut t, &vs)?;
        let y = t.scalar(r);
        if !y.is_finite() {
            return Err(Error::numeric("grad_check", format!("f(x + h) = {y}")));
        }
        Ok(y)
    };

    let mut probe: Vec<Tensor> = xs.to_vec();
    let mut worst = 0.0f64;
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
