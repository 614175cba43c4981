use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Logits of every `(layer group, channel group)` head for one batch,
/// stored as `[L, C, batch, classes]`.
///
/// Head coordinates are 1-based, matching [`SliceId`](crate::SliceId).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid<S> {
    layers: usize,
    groups: usize,
    batch: usize,
    classes: usize,
    data: Vec<S>,
}

impl<S: Scalar> LogitsGrid<S> {
    pub(crate) fn from_sites(sites: Vec<Vec<S>>, groups: usize, batch: usize, classes: usize) -> Self {
        let layers = sites.len();
        let data: Vec<S> = sites.into_iter().flatten().collect();
        debug_assert_eq!(data.len(), layers * groups * batch * classes);
        LogitsGrid {
            layers,
            groups,
            batch,
            classes,
            data,
        }
    }

    pub fn zeros_like(other: &LogitsGrid<S>) -> Self {
        LogitsGrid {
            data: alloc::vec![S::zero(); other.data.len()],
            ..*other
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn offset(&self, l: usize, c: usize) -> Result<usize> {
        if l == 0 || c == 0 || l > self.layers || c > self.groups {
            return Err(Error::HeadOutOfRange {
                l,
                c,
                layers: self.layers,
                groups: self.groups,
            });
        }
        Ok(((l - 1) * self.groups + (c - 1)) * self.batch * self.classes)
    }

    /// Logits `[batch × classes]` of head `(l, c)`.
    pub fn head(&self, l: usize, c: usize) -> Result<&[S]> {
        let off = self.offset(l, c)?;
        Ok(&self.data[off..off + self.batch * self.classes])
    }

    pub fn head_mut(&mut self, l: usize, c: usize) -> Result<&mut [S]> {
        let off = self.offset(l, c)?;
        let len = self.batch * self.classes;
        Ok(&mut self.data[off..off + len])
    }

    pub fn head_tensor(&self, l: usize, c: usize) -> Result<Tensor<S>> {
        Tensor::from_vec(&[self.batch, self.classes], self.head(l, c)?.to_vec())
    }

    /// All heads of layer group `l` as `[C, batch, classes]`.
    pub(crate) fn site(&self, l: usize) -> &[S] {
        let len = self.groups * self.batch * self.classes;
        &self.data[(l - 1) * len..l * len]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
}
