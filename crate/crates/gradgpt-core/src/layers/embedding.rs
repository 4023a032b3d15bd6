//! Embedding lookup: one-hot selection realized as a row gather.
//!
//! Forward is mathematically `ohe(ids)·w_emb`; backward is `ohe(ids)ᵗ·Δ`.
//! Neither materializes the one-hot matrix — forward gathers rows, backward
//! scatter-adds signal rows into the gradient table. The error flow stops
//! here: there is no downstream signal to produce.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// An embedding table. Row `v` is the vector for id `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T: Scalar = f64> {
    pub w_emb: Matrix<T>,
}

impl<T: Scalar> EmbeddingParams<T> {
    pub fn zeros(n_v: usize, d: usize) -> Self {
        EmbeddingParams { w_emb: Matrix::zeros(n_v, d) }
    }

    /// Number of distinct ids the table covers.
    pub fn n_v(&self) -> usize {
        self.w_emb.rows()
    }
}

fn check_ids(ids: &[usize], n_v: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid("token sequence must not be empty".into()));
    }
    for (position, &id) in ids.iter().enumerate() {
        if id >= n_v {
            return Err(Error::TokenOutOfRange { id, position, n_vocab: n_v });
        }
    }
    Ok(())
}

/// Gather: output row `t` is table row `ids[t]`.
pub fn embedding_forward<T: Scalar>(ids: &[usize], p: &EmbeddingParams<T>) -> Result<Matrix<T>> {
    check_ids(ids, p.n_v())?;
    let d = p.w_emb.cols();
    let mut out = Matrix::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        out.row_mut(t).copy_from_slice(p.w_emb.row(id));
    }
    Ok(out)
}

/// Scatter-add: gradient row `v` accumulates the signal rows of every
/// position that carried id `v`; untouched rows stay zero.
pub fn embedding_backward<T: Scalar>(
    ids: &[usize],
    delta: &Matrix<T>,
    n_v: usize,
) -> Result<Matrix<T>> {
    check_ids(ids, n_v)?;
    assert_eq!(
        delta.rows(),
        ids.len(),
        "embedding_backward: signal has {} rows but sequence has {} tokens",
        delta.rows(),
        ids.len()
    );
    let mut grad = Matrix::zeros(n_v, delta.cols());
    for (t, &id) in ids.iter().enumerate() {
        for (g, &d) in grad.row_mut(id).iter_mut().zip(delta.row(t)) {
            *g += d;
        }
    }
    Ok(grad)
}
