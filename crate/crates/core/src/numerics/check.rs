//! Central finite-difference gradient checking.

use alloc::format;

use super::real::Real;
use super::tape::{GradTape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates `f` forward-only at `x` and returns the scalar value.
fn eval<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: Fn(&mut GradTape<T>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.scalar_value(out)?;
    if !val.is_finite() {
        return Err(Error::invalid("grad_check: f returned a non-finite value"));
    }
    Ok(val)
}

/// Compares the tape gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// Returns the maximum over coordinates of
/// `|analytic − central| / max(1, |analytic|)`.
pub fn grad_check<T: Real, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    F: Fn(&mut GradTape<T>, Var) -> Result<Var>,
{
    let eps_f = eps.to_f64();
    if !(eps_f > 0.0 && eps_f <= 1e-2) {
        return Err(Error::config(format!(
            "grad_check: eps must be in (0, 1e-2], got {eps_f}"
        )));
    }

    let mut tape = GradTape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.scalar_value(out)?;
    if !val.is_finite() {
        return Err(Error::invalid("grad_check: f returned a non-finite value"));
    }
    let analytic = tape.backward(out)?.wrt(v);

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fp = eval(&f, &xp)?.to_f64();
        let fm = eval(&f, &xm)?.to_f64();
        let numeric = (fp - fm) / (2.0 * eps_f);
        let a = analytic.data()[i].to_f64();
        let err = (a - numeric).abs() / f64::max(1.0, a.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
