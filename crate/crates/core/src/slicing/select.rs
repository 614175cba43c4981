use alloc::vec;
use core::cmp::Ordering;

use super::{SliceCost, SliceId};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Upper limits on slice costs; `None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Budget {
    pub max_macs: Option<u64>,
    pub max_params: Option<u64>,
    pub max_peak_activation: Option<u64>,
}

impl Budget {
    pub const UNBOUNDED: Budget = Budget {
        max_macs: None,
        max_params: None,
        max_peak_activation: None,
    };

    pub fn admits(&self, cost: &SliceCost) -> bool {
        let within = |limit: Option<u64>, v: u64| limit.map_or(true, |m| v <= m);
        within(self.max_macs, cost.macs)
            && within(self.max_params, cost.params)
            && within(self.max_peak_activation, cost.peak_activation)
    }
}

/// Highest-scoring slice whose cost fits `budget`.
///
/// Ties on score go to fewer MACs, then fewer parameters, then the smaller
/// `(d, w)` in lexicographic order. Slices with a NaN score are never
/// chosen. Returns `Ok(None)` when nothing fits.
pub fn select_slice(costs: &Grid<SliceCost>, scores: &Grid<f64>, budget: &Budget) -> Result<Option<SliceId>> {
    if costs.rows() != scores.rows() || costs.cols() != scores.cols() {
        return Err(Error::ShapeMismatch {
            op: "select_slice",
            left: vec![costs.rows(), costs.cols()],
            right: vec![scores.rows(), scores.cols()],
        });
    }
    let mut best: Option<(SliceId, f64, SliceCost)> = None;
    for ((r, c), cost) in costs.iter() {
        let score = scores[(r, c)];
        if score.is_nan() || !budget.admits(cost) {
            continue;
        }
        let id = SliceId { d: r + 1, w: c + 1 };
        let better = match &best {
            None => true,
            Some((bid, bscore, bcost)) => {
                let order = score
                    .partial_cmp(bscore)
                    .expect("NaN scores are skipped")
                    .then_with(|| bcost.macs.cmp(&cost.macs))
                    .then_with(|| bcost.params.cmp(&cost.params))
                    .then_with(|| bid.cmp(&id));
                order == Ordering::Greater
            }
        };
        if better {
            best = Some((id, score, *cost));
        }
    }
    Ok(best.map(|(id, _, _)| id))
}
