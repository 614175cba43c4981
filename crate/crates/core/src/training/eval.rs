use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::Result;
use crate::grid::Grid;
use crate::nested::NestedModel;
use crate::numerics::{argmax, cross_entropy_raw, Scalar};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMetrics {
    pub accuracy: Grid<f64>,
    /// Mean cross-entropy per head over the whole dataset.
    pub loss: Grid<f64>,
}

/// Top-1 accuracy of every head over `data` (inference mode).
pub fn evaluate_grid<S: Scalar>(model: &NestedModel<S>, data: &Dataset) -> Result<Grid<f64>> {
    Ok(evaluate(model, data)?.accuracy)
}

/// Accuracy and mean loss of every head. Correct counts are integers, so
/// the accuracy does not depend on chunking.
pub fn evaluate<S: Scalar>(model: &NestedModel<S>, data: &Dataset) -> Result<GridMetrics> {
    let (layers, groups) = (model.layers(), model.groups());
    let mut correct = Grid::filled(layers, groups, 0usize);
    let mut loss_sum = Grid::filled(layers, groups, 0.0f64);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather::<S>(chunk)?;
        let grid = model.forward_grid(&x)?;
        for l in 1..=layers {
            for c in 1..=groups {
                let logits = grid.head(l, c)?;
                let n = grid.classes();
                let hits = labels
                    .iter()
                    .enumerate()
                    .filter(|&(b, &y)| argmax(&logits[b * n..(b + 1) * n]) == y)
                    .count();
                correct[(l - 1, c - 1)] += hits;
                let (mean, _) = cross_entropy_raw(logits, &labels, n)?;
                loss_sum[(l - 1, c - 1)] += mean.as_f64() * chunk.len() as f64;
            }
        }
    }
    let total = data.len().max(1) as f64;
    Ok(GridMetrics {
        accuracy: correct.map(|&k| k as f64 / total),
        loss: loss_sum.map(|&s| s / total),
    })
}
