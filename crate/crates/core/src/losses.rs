//! Static, semantic and overall training losses.
//!
//! * static: mean absolute error over cells,
//! * semantic: mean of `λ_c (y*_c - y_c)^2` with `λ_c = 1 + k_s y*_c`,
//! * overall: `static + k_0 * semantic`.
//!
//! Targets are constants; only predictions carry gradients. The means run
//! over every element, so batch and time are averaged alongside the cells.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the semantic term in the overall loss.
    pub k0: f64,
    /// Extra weight of occupied vehicle cells in the semantic loss.
    pub ks: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { k0: 10.0, ks: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 >= 0.0 && self.ks >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got k0={} ks={}",
                self.k0, self.ks
            )));
        }
        Ok(())
    }
}

fn target<T: Scalar>(
    g: &mut Graph<T>,
    y_true: &Tensor<T>,
    y_pred: Var,
    op: &'static str,
) -> Result<Var> {
    if y_true.shape() != g.value(y_pred).shape() {
        return Err(Error::shape(
            op,
            format!(
                "target {:?} vs prediction {:?}",
                y_true.shape(),
                g.value(y_pred).shape()
            ),
        ));
    }
    Ok(g.constant(y_true.clone()))
}

pub fn static_loss<T: Scalar>(g: &mut Graph<T>, y_true: &Tensor<T>, y_pred: Var) -> Result<Var> {
    let t = target(g, y_true, y_pred, "static_loss")?;
    let d = g.sub(t, y_pred)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `λ_c = 1 + ks * y*_c` for every cell.
pub fn lambda_weights<T: Scalar>(y_true: &Tensor<T>, ks: f64) -> Tensor<T> {
    let ks = T::from_f64_lossy(ks);
    y_true.map(|y| T::one() + ks * y)
}

pub fn semantic_loss<T: Scalar>(
    g: &mut Graph<T>,
    y_true: &Tensor<T>,
    y_pred: Var,
    ks: f64,
) -> Result<Var> {
    let t = target(g, y_true, y_pred, "semantic_loss")?;
    let lambda = g.constant(lambda_weights(y_true, ks));
    let d = g.sub(t, y_pred)?;
    let sq = g.square(d)?;
    let w = g.mul(lambda, sq)?;
    g.mean(w)
}

pub fn overall_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_static: Var,
    l_semantic: Var,
    k0: f64,
) -> Result<Var> {
    let weighted = g.scale(l_semantic, T::from_f64_lossy(k0))?;
    g.add(l_static, weighted)
}
