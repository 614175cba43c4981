use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::BinaryMask;

/// Partition of every stage's channels into `C` ordered channel groups.
///
/// For stage `s`, `bounds(s)[g]` is the cumulative channel count of groups
/// `0..=g`; group `g` occupies channels `bounds[g-1]..bounds[g]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    groups: usize,
    boundaries: Vec<Vec<usize>>,
}

impl GroupSpec {
    /// Group `i` of a width-`S` stage covers channels `i·S/C .. (i+1)·S/C`.
    /// Every width must be divisible by `groups`.
    pub fn proportional(stage_widths: &[usize], groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidBoundaries("group count must be positive".into()));
        }
        let mut boundaries = Vec::with_capacity(stage_widths.len());
        for (stage, &width) in stage_widths.iter().enumerate() {
            if width == 0 || width % groups != 0 {
                let lower = (width / groups).max(1) * groups;
                let upper = (width / groups + 1) * groups;
                return Err(Error::IndivisibleWidth {
                    stage,
                    width,
                    groups,
                    lower,
                    upper,
                });
            }
            boundaries.push((1..=groups).map(|g| g * width / groups).collect());
        }
        Self::from_boundaries(boundaries)
    }

    /// Explicit boundaries; each list must be strictly increasing and all
    /// lists must have the same length.
    pub fn from_boundaries(boundaries: Vec<Vec<usize>>) -> Result<Self> {
        let groups = boundaries.first().map_or(0, Vec::len);
        if boundaries.is_empty() || groups == 0 {
            return Err(Error::InvalidBoundaries("need at least one stage and one group".into()));
        }
        for (stage, b) in boundaries.iter().enumerate() {
            if b.len() != groups {
                return Err(Error::GroupCountMismatch {
                    left: groups,
                    right: b.len(),
                });
            }
            let increasing = b[0] > 0 && b.windows(2).all(|w| w[0] < w[1]);
            if !increasing {
                return Err(Error::InvalidBoundaries(format!(
                    "stage {stage} boundaries {b:?} are not strictly increasing from a positive start"
                )));
            }
        }
        Ok(GroupSpec { groups, boundaries })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn stages(&self) -> usize {
        self.boundaries.len()
    }

    pub fn bounds(&self, stage: usize) -> &[usize] {
        &self.boundaries[stage]
    }

    pub fn all_bounds(&self) -> &[Vec<usize>] {
        &self.boundaries
    }

    pub fn width(&self, stage: usize) -> usize {
        *self.boundaries[stage].last().expect("non-empty")
    }

    /// Channels of `stage` kept when retaining the first `w` groups (`w ≥ 1`).
    pub fn retained(&self, stage: usize, w: usize) -> usize {
        self.boundaries[stage][w - 1]
    }

    /// Zero-based group of `channel` in `stage`.
    pub fn group_of(&self, stage: usize, channel: usize) -> usize {
        group_of(&self.boundaries[stage], channel)
    }
}

/// First group whose cumulative bound exceeds `channel`.
pub(crate) fn group_of(bounds: &[usize], channel: usize) -> usize {
    bounds.partition_point(|&b| b <= channel)
}

/// Block-lower-triangular mask: `mask[o, i, ·, ·] = 1` iff
/// `group(i | in_bounds) ≤ group(o | out_bounds)`.
///
/// `in_bounds` may be non-strict (the network input uses `[Cin; C]`, which
/// places every input channel in group 0).
pub fn build_mask(in_bounds: &[usize], out_bounds: &[usize], k: usize) -> Result<BinaryMask> {
    if in_bounds.len() != out_bounds.len() {
        return Err(Error::GroupCountMismatch {
            left: in_bounds.len(),
            right: out_bounds.len(),
        });
    }
    let (ci, co) = match (in_bounds.last(), out_bounds.last()) {
        (Some(&ci), Some(&co)) if ci > 0 && co > 0 && k > 0 => (ci, co),
        _ => return Err(Error::InvalidBoundaries("empty boundaries or zero kernel".into())),
    };
    let out_group: Vec<usize> = (0..co).map(|o| group_of(out_bounds, o)).collect();
    let in_group: Vec<usize> = (0..ci).map(|i| group_of(in_bounds, i)).collect();
    Ok(BinaryMask::from_fn([co, ci, k, k], |o, i, _, _| in_group[i] <= out_group[o]))
}
