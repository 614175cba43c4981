use alloc::vec;

use super::LossWeightMatrix;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nested::LogitsGrid;
use crate::numerics::{cross_entropy_raw, Scalar};

/// Batch-mean cross-entropy of every head: `loss[l][c] = -mean log softmax(Z^l_c)[y]`.
pub fn head_loss<S: Scalar>(grid: &LogitsGrid<S>, labels: &[usize]) -> Result<Grid<f64>> {
    check_batch(grid, labels)?;
    let mut out = Grid::filled(grid.layers(), grid.groups(), 0.0);
    for l in 1..=grid.layers() {
        for c in 1..=grid.groups() {
            let (loss, _) = cross_entropy_raw(grid.head(l, c)?, labels, grid.classes())?;
            out[(l - 1, c - 1)] = loss.as_f64();
        }
    }
    Ok(out)
}

/// `Σ λ(l,c) · loss(l,c) / Σ λ(l,c)`, summed in row-major order.
pub fn aggregate_loss(losses: &Grid<f64>, weights: &LossWeightMatrix) -> Result<f64> {
    let lam = weights.values();
    if lam.rows() != losses.rows() || lam.cols() != losses.cols() {
        return Err(Error::ShapeMismatch {
            op: "aggregate_loss",
            left: vec![losses.rows(), losses.cols()],
            right: vec![lam.rows(), lam.cols()],
        });
    }
    let total = weights.sum();
    if total == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut acc = 0.0;
    for (&l, &w) in losses.as_slice().iter().zip(lam.as_slice()) {
        acc += w * l;
    }
    Ok(acc / total)
}

/// Aggregate loss, per-head losses and the gradient of the aggregate with
/// respect to every head's logits (`λ(l,c)/Σλ · (softmax − onehot)/B`).
#[derive(Debug, Clone)]
pub struct AggregateLoss<S> {
    pub value: f64,
    pub heads: Grid<f64>,
    pub grad: LogitsGrid<S>,
}

pub fn aggregate_loss_with_grad<S: Scalar>(
    grid: &LogitsGrid<S>,
    labels: &[usize],
    weights: &LossWeightMatrix,
) -> Result<AggregateLoss<S>> {
    check_batch(grid, labels)?;
    let lam = weights.values();
    if lam.rows() != grid.layers() || lam.cols() != grid.groups() {
        return Err(Error::ShapeMismatch {
            op: "aggregate_loss_with_grad",
            left: vec![grid.layers(), grid.groups()],
            right: vec![lam.rows(), lam.cols()],
        });
    }
    let total = weights.sum();
    if total == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut heads = Grid::filled(grid.layers(), grid.groups(), 0.0);
    let mut grad = LogitsGrid::zeros_like(grid);
    for l in 1..=grid.layers() {
        for c in 1..=grid.groups() {
            let (loss, g) = cross_entropy_raw(grid.head(l, c)?, labels, grid.classes())?;
            heads[(l - 1, c - 1)] = loss.as_f64();
            let scale = S::from_f64(lam[(l - 1, c - 1)] / total);
            for (dst, &v) in grad.head_mut(l, c)?.iter_mut().zip(&g) {
                *dst = scale * v;
            }
        }
    }
    let value = aggregate_loss(&heads, weights)?;
    Ok(AggregateLoss { value, heads, grad })
}

fn check_batch<S: Scalar>(grid: &LogitsGrid<S>, labels: &[usize]) -> Result<()> {
    if grid.batch() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "head_loss",
            left: vec![grid.batch()],
            right: vec![labels.len()],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::WeightKind;
    use alloc::vec::Vec;

    #[test]
    fn flat_is_arithmetic_mean() {
        let g = Grid::from_vec(2, 2, [1.0, 2.0, 3.0, 4.0].to_vec()).unwrap();
        assert_eq!(aggregate_loss(&g, &LossWeightMatrix::flat(2, 2)).unwrap(), 2.5);
    }

    #[test]
    fn scaling_cancels() {
        let g = Grid::from_vec(2, 2, [0.3, 1.7, 2.2, 0.9].to_vec()).unwrap();
        let lam = LossWeightMatrix::make(WeightKind::Descend { gamma: 1.7 }, 2, 2).unwrap();
        let base = aggregate_loss(&g, &lam).unwrap();
        for k in [1e-3, 1.0, 1e3] {
            let v = aggregate_loss(&g, &lam.scaled(k).unwrap()).unwrap();
            assert!((v - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_selects_a_head() {
        let g = Grid::from_vec(2, 3, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6].to_vec()).unwrap();
        let lam = LossWeightMatrix::one_hot(2, 3, 2, 2).unwrap();
        assert_eq!(aggregate_loss(&g, &lam).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Grid::filled(2, 2, 1.0);
        assert!(aggregate_loss(&g, &LossWeightMatrix::flat(2, 3)).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let sites: Vec<Vec<f64>> = (0..2).map(|_| alloc::vec![0.0; 2 * 3 * 10]).collect();
        let grid = LogitsGrid::from_sites(sites, 2, 3, 10);
        let losses = head_loss(&grid, &[0, 5, 9]).unwrap();
        for (_, &v) in losses.iter() {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
    }
}
