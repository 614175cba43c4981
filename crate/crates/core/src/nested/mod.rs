//! The doubly nested architecture.
//!
//! Channels of every stage are split into `C` ordered groups ([`GroupSpec`]).
//! Every convolution carries a block-lower-triangular mask over groups
//! ([`build_mask`]), batch norm and ReLU act per channel, and identity
//! shortcuts map channel `c` to channel `c`, so the first `w` groups of any
//! layer depend only on the first `w` groups of the layers below. A head
//! site after selected blocks pools the features and evaluates `C`
//! cumulative classifiers sharing one weight matrix.

mod arch;
pub(crate) mod eval;
mod groups;
mod logits;
mod model;

pub use arch::{ArchDescriptor, HeadSites};
pub use groups::{build_mask, GroupSpec};
pub use logits::LogitsGrid;
pub use model::{CausalLayer, ConvBn, Gradients, LayerKind, NestedModel, ParamRef, ResidualBlock, Tape};
