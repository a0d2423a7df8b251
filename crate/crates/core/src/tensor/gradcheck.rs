//! Central finite-difference checks against the analytic backward pass.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function of one tensor, evaluable at any precision.
///
/// Implemented by gradient tests so the same function can produce analytic
/// gradients in `f32` and a finite-difference reference in `f64`.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<T: Scalar, F>(f: &F, point: Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x)?;
    let v = g.value(y).item()?.to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(Error::Numerical(format!(
            "function value {v} is not finite"
        )));
    }
    Ok(v)
}

fn analytic_gradient<T: Scalar, F>(f: &F, point: &Tensor<T>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let grad = grads.get(x).expect("gradient for param");
    let out: Vec<f64> = grad
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect();
    if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "analytic gradient coordinate {bad} is not finite"
        )));
    }
    Ok(out)
}

fn numeric_gradient<T: Scalar, F>(f: &F, point: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let h = T::from_f64_lossy(eps);
    (0..point.len())
        .map(|i| {
            let mut plus = point.clone();
            plus.data_mut()[i] = plus.data()[i] + h;
            let mut minus = point.clone();
            minus.data_mut()[i] = minus.data()[i] - h;
            // the realised step, not the nominal one
            let step = plus.data()[i].to_f64().unwrap() - minus.data()[i].to_f64().unwrap();
            Ok((eval_scalar(f, plus)? - eval_scalar(f, minus)?) / step)
        })
        .collect()
}

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central difference with step `eps`, both at precision `T`.
///
/// Per coordinate the error is `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn finite_diff_check<T: Scalar, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &c)| relative_error(a, c))
        .fold(0.0, f64::max))
}

/// Checks `f32` analytic gradients against an `f64` central difference.
///
/// The point is rounded to `f32` first so both sides see the same input.
pub fn check_f32_gradient<F: ScalarFunction>(f: &F, point: &Tensor<f64>, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let single: Tensor<f32> = point.cast();
    let analytic = analytic_gradient(&|g: &mut Graph<f32>, x| f.eval(g, x), &single)?;
    let reference: Tensor<f64> = single.cast();
    let numeric = numeric_gradient(&|g: &mut Graph<f64>, x| f.eval(g, x), &reference, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &c)| relative_error(a, c))
        .fold(0.0, f64::max))
}
