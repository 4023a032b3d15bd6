//! Next-token cross-entropy over softmax predictions.
//!
//! Targets are per-position and optional: under the shift-by-one convention
//! the final position predicts beyond the sequence and carries no target.
//! The loss is the MEAN of `−ln y_pred[t][target_t]` over contributing
//! positions, and the matching backward signal is `(y_pred − onehot)/n_contrib`
//! on contributing rows and zero elsewhere.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Matrix};

pub(crate) fn check_targets<T: Scalar>(
    targets: &[Option<usize>],
    logits_like: &Matrix<T>,
) -> Result<usize> {
    assert_eq!(
        targets.len(),
        logits_like.rows(),
        "targets cover {} positions but logits have {} rows",
        targets.len(),
        logits_like.rows()
    );
    let n_vocab = logits_like.cols();
    let mut n_contrib = 0;
    for (position, tgt) in targets.iter().enumerate() {
        if let Some(id) = *tgt {
            if id >= n_vocab {
                return Err(Error::TargetOutOfRange { id, position, n_vocab });
            }
            n_contrib += 1;
        }
    }
    if n_contrib == 0 {
        return Err(Error::Invalid(
            "no position carries a target — a single-token sequence has nothing to predict".into(),
        ));
    }
    Ok(n_contrib)
}

/// Softmax the logits row-wise and average the negative log-likelihood of
/// the targets. Returns the loss and the prediction matrix.
pub fn loss_forward<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[Option<usize>],
) -> Result<(T, Matrix<T>)> {
    let n_contrib = check_targets(targets, logits)?;
    let y_pred = softmax_rows(logits, None);
    let mut loss = T::ZERO;
    for (t, tgt) in targets.iter().enumerate() {
        if let Some(id) = *tgt {
            loss += -(y_pred[(t, id)].ln());
        }
    }
    loss /= T::from_f64(n_contrib as f64);
    Ok((loss, y_pred))
}

/// Error signal at the logits: contributing rows get
/// `(y_pred_row − onehot(target))/n_contrib`, the rest stay zero.
///
/// `n_contrib` must equal the number of present targets (it is part of the
/// loss definition, so the caller passes the value it normalized with).
pub fn loss_backward<T: Scalar>(
    y_pred: &Matrix<T>,
    targets: &[Option<usize>],
    n_contrib: usize,
) -> Result<Matrix<T>> {
    let counted = check_targets(targets, y_pred)?;
    assert_eq!(
        counted, n_contrib,
        "n_contrib {n_contrib} does not match the {counted} present targets"
    );
    let inv = T::ONE / T::from_f64(n_contrib as f64);
    let mut delta = Matrix::zeros(y_pred.rows(), y_pred.cols());
    for (t, tgt) in targets.iter().enumerate() {
        if let Some(id) = *tgt {
            let row = delta.row_mut(t);
            for (j, &p) in y_pred.row(t).iter().enumerate() {
                row[j] = p * inv;
            }
            row[id] -= inv;
        }
    }
    Ok(delta)
}
