use alloc::vec;
use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-mean cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<S> {
    pub loss: S,
    /// `(softmax - one_hot) / batch`, same shape as the logits.
    pub grad: Tensor<S>,
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// subtracting the row maximum.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<CrossEntropy<S>> {
    let (b, n) = match logits.shape() {
        &[b, n] if b == labels.len() => (b, n),
        s => {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            })
        }
    };
    let (loss, grad) = cross_entropy_raw(logits.data(), labels, n)?;
    Ok(CrossEntropy {
        loss,
        grad: Tensor::from_vec(&[b, n], grad)?,
    })
}

pub(crate) fn cross_entropy_raw<S: Scalar>(logits: &[S], labels: &[usize], classes: usize) -> Result<(S, Vec<S>)> {
    let batch = labels.len();
    let inv_b = S::one() / S::from_usize(batch);
    let mut total = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &z in row {
            denom = denom + (z - max).exp();
        }
        let log_denom = denom.ln();
        total = total + (log_denom - (row[label] - max));
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (j, (gv, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - max - log_denom).exp();
            let target = if j == label { S::one() } else { S::zero() };
            *gv = (p - target) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Index of the largest logit (first on ties).
pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
