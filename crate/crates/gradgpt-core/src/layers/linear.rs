//! Fully-connected layer: `out = a·w + b̃`.

use crate::scalar::Scalar;
use crate::tensor::{broadcast_row, Matrix};

/// Weights and bias of a fully-connected layer mapping `f_in → f_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Scalar = f64> {
    /// `f_in × f_out` weight matrix (inputs hit it from the left as rows).
    pub w: Matrix<T>,
    /// Bias, one entry per output feature; broadcast over rows in forward.
    pub b: Vec<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(f_in: usize, f_out: usize) -> Self {
        LinearParams { w: Matrix::zeros(f_in, f_out), b: vec![T::ZERO; f_out] }
    }

    pub fn f_in(&self) -> usize {
        self.w.rows()
    }

    pub fn f_out(&self) -> usize {
        self.w.cols()
    }
}

/// Gradients of a fully-connected layer, same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<T: Scalar = f64> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LinearGrads<T> {
    pub fn zeros_like(p: &LinearParams<T>) -> Self {
        LinearGrads { w: Matrix::zeros(p.f_in(), p.f_out()), b: vec![T::ZERO; p.f_out()] }
    }
}

/// `a·w + b̃` with the bias broadcast across rows.
pub fn linear_forward<T: Scalar>(a: &Matrix<T>, p: &LinearParams<T>) -> Matrix<T> {
    assert_eq!(
        a.cols(),
        p.f_in(),
        "linear_forward: input has {} features but layer expects {}",
        a.cols(),
        p.f_in()
    );
    assert_eq!(p.b.len(), p.f_out(), "linear layer bias length {} != f_out {}", p.b.len(), p.f_out());
    a.matmul(&p.w).add(&broadcast_row(&p.b, a.rows()))
}

/// Backward pass of the fully-connected layer.
///
/// With upstream signal `Δ` and cached input `a`:
/// downstream signal `Δ·wᵗ`, weight gradient `aᵗ·Δ`, bias gradient
/// `Σ_tokens Δ` (the bias reaches every row, so its gradient is the column
/// sum of the signal).
pub fn linear_backward<T: Scalar>(
    delta: &Matrix<T>,
    a_in: &Matrix<T>,
    p: &LinearParams<T>,
) -> (Matrix<T>, LinearGrads<T>) {
    assert_eq!(
        delta.cols(),
        p.f_out(),
        "linear_backward: signal has {} features but layer produces {}",
        delta.cols(),
        p.f_out()
    );
    assert_eq!(
        a_in.rows(),
        delta.rows(),
        "linear_backward: input has {} rows but signal has {}",
        a_in.rows(),
        delta.rows()
    );
    let delta_in = delta.matmul(&p.w.transpose());
    let grad_w = a_in.transpose().matmul(delta);
    let grad_b = delta.sum_over_tokens();
    (delta_in, LinearGrads { w: grad_w, b: grad_b })
}
