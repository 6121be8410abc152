//! Finite-difference verification of back-propagated gradients.
//!
//! The reference derivative is always computed in `f64`: a central difference
//! at step `h` and at `h / 2`, combined by Richardson extrapolation so the
//! truncation error is `O(h^4)`. The analytic side is computed in the
//! requested precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Base finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// A scalar-valued function that can be evaluated at any precision.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Acceptance threshold on [`GradCheckReport::max_rel_err`].
    pub fn default_tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-4,
            Precision::F64 => 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub precision: Precision,
    /// Worst error over inputs; each input's error is the max absolute
    /// deviation divided by the largest reference gradient magnitude.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

fn eval_scalar<F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

fn analytic_grads<T: Scalar, F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
    let out = f.eval(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.to_f64())
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

/// Numeric gradient of `f` with respect to every element of every input.
pub fn numeric_grads<F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work[k].data_mut()[i] = x0 + h;
                let fp = eval_scalar(f, &work)?;
                work[k].data_mut()[i] = x0 - h;
                let fm = eval_scalar(f, &work)?;
                work[k].data_mut()[i] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let coarse = central(FD_STEP)?;
            let fine = central(FD_STEP / 2.0)?;
            grad.data_mut()[i] = (4.0 * fine - coarse) / 3.0;
        }
        result.push(grad);
    }
    Ok(result)
}

pub fn grad_check<F: Differentiable>(f: &F, inputs: &[Tensor<f64>], precision: Precision) -> Result<GradCheckReport> {
    // Reject non-scalar outputs before doing any finite differencing.
    eval_scalar(f, inputs)?;
    let analytic = match precision {
        Precision::F32 => analytic_grads::<f32, F>(f, inputs)?,
        Precision::F64 => analytic_grads::<f64, F>(f, inputs)?,
    };
    let numeric = numeric_grads(f, inputs)?;
    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = n.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let err = a
                .data()
                .iter()
                .zip(n.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            err / scale
        })
        .collect();
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        precision,
        max_rel_err,
        per_input,
        analytic,
        numeric,
    })
}
