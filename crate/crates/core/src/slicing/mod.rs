//! Slice extraction, the analytic cost model and budgeted slice selection.

mod cost;
mod select;
mod sliced;

pub use cost::{cost, cost_table, SliceCost};
pub use select::{select_slice, Budget};
pub use sliced::{slice, SlicedBlock, SlicedConvBn, SlicedModel};

use crate::error::{Error, Result};

/// Coordinates of a slice: `d` layer groups and `w` channel groups, both
/// 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SliceId {
    pub d: usize,
    pub w: usize,
}

impl SliceId {
    /// Checked constructor for an `layers × groups` grid.
    pub fn new(d: usize, w: usize, layers: usize, groups: usize) -> Result<Self> {
        if d == 0 || w == 0 || d > layers || w > groups {
            return Err(Error::HeadOutOfRange {
                l: d,
                c: w,
                layers,
                groups,
            });
        }
        Ok(SliceId { d, w })
    }
}

impl core::fmt::Display for SliceId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({}, {})", self.d, self.w)
    }
}
