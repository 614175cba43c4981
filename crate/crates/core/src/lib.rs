//! Doubly nested convolutional networks.
//!
//! A single trained [`NestedModel`] embeds an `L × C` grid of working
//! sub-models: `L` layer groups (one classifier head site each) by `C`
//! channel groups. Convolutions are channel-causal, meaning channel group `g`
//! of a layer only reads channel groups `1..=g` of the layer below, so the
//! first `w` groups of every layer form a self-contained network. Each head
//! site carries a cumulative classifier whose logits for `c` groups are a
//! prefix sum over the first `c` groups of pooled features.
//!
//! Any `(d, w)` slice can be extracted with [`slicing::slice`] into a dense
//! [`SlicedModel`] whose output is bit-identical to
//! [`NestedModel::forward_head`]. This holds because every convolution,
//! pooling and classifier accumulation in the crate follows one fixed
//! summation order, shared by the masked and the sliced code paths.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, dataset readers and
//! the command line live in the `nestnet` companion crate.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, masked convolution, batch norm, pooling, softmax
//!   cross-entropy, their gradients, a portable RNG and a finite-difference
//!   gradient checker.
//! - [`nested`]: channel groups, causal masks, residual blocks, head bank and
//!   the full model with forward/backward passes.
//! - [`training`]: per-head and aggregate losses, loss-weight matrices,
//!   SGD with momentum, accuracy grids.
//! - [`slicing`]: slice extraction, analytic cost model, budgeted selection.
//! - [`data`]: synthetic oriented-bar dataset and deterministic batching.
//! - [`verify`]: the invariant suite (causality, slice equivalence, gradients,
//!   cost oracle, selector oracle).
#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod grid;
pub mod nested;
pub mod numerics;
pub mod slicing;
pub mod training;
pub mod verify;

pub use data::Dataset;
pub use error::{Error, Result};
pub use grid::Grid;
pub use nested::{ArchDescriptor, GroupSpec, HeadSites, LogitsGrid, NestedModel};
pub use numerics::{Rng, Scalar, Tensor};
pub use slicing::{Budget, SliceCost, SliceId, SlicedModel};
pub use training::{LossWeightMatrix, MetricsLog, TrainConfig};
