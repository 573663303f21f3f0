//! Row-wise nonlinear kernels of the transformer and their derivatives.

use super::{Matrix, Scalar};
use crate::error::{shape_err, Result};

/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044715;

pub const DEFAULT_LAYERNORM_EPS: f64 = 1e-5;

/// Softmax over each row, stabilized by subtracting the row maximum.
/// Entries equal to `-∞` receive probability zero.
pub fn softmax_rows<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row
            .iter()
            .copied()
            .fold(T::from_f64(f64::NEG_INFINITY), |m, v| m.max(v));
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient of a row softmax: `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
pub fn softmax_rows_backward<T: Scalar>(probs: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad.row(i);
        let inner: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &gv) in out.row_mut(i).iter_mut().zip(p).zip(g) {
            *o = pv * (gv - inner);
        }
    }
    out
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * k * x * x)
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    a.map(gelu_scalar)
}

/// Chain rule through [`gelu`], given its input and the output gradient.
pub fn gelu_backward<T: Scalar>(input: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
    let mut out = grad.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
        *o *= gelu_grad_scalar(x);
    }
    out
}

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last dimension followed by `gain`/`bias`.
pub fn layernorm<T: Scalar>(
    a: &Matrix<T>,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = a.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(
            "layernorm",
            format!("gain {} / bias {} for width {d}", gain.len(), bias.len()),
        ));
    }
    let n = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let mut normalized = Matrix::zeros(a.rows(), d);
    let mut out = Matrix::zeros(a.rows(), d);
    let mut rstd = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let x = a.row(i);
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<T>()
            / n;
        let r = T::ONE / (var + eps).sqrt();
        rstd.push(r);
        let xn = normalized.row_mut(i);
        for (o, &v) in xn.iter_mut().zip(x) {
            *o = (v - mean) * r;
        }
        let xn = normalized.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = xn[j] * gain[j] + bias[j];
        }
    }
    Ok((out, LayerNormCache { normalized, rstd }))
}

/// Input gradient of [`layernorm`] (gain and bias are treated as constants).
pub fn layernorm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    grad: &Matrix<T>,
) -> Matrix<T> {
    let d = grad.cols();
    let n = T::from_f64(d as f64);
    let mut out = Matrix::zeros(grad.rows(), d);
    for i in 0..grad.rows() {
        let g = grad.row(i);
        let xn = cache.normalized.row(i);
        let dxhat: Vec<T> = g.iter().zip(gain).map(|(&a, &b)| a * b).collect();
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xn).map(|(&a, &b)| a * b).sum::<T>() / n;
        let r = cache.rstd[i];
        for ((o, &dh), &x) in out.row_mut(i).iter_mut().zip(&dxhat).zip(xn) {
            *o = r * (dh - mean_d - x * mean_dx);
        }
    }
    out
}
