//! Per-head and aggregate losses, loss-weight matrices, and the joint
//! training loop for all `L × C` heads.

mod eval;
mod loss;
mod train;
mod weights;

pub use eval::{evaluate, evaluate_grid, GridMetrics};
pub use loss::{aggregate_loss, aggregate_loss_with_grad, head_loss, AggregateLoss};
pub use train::{train, MetricsEntry, MetricsLog, Precision, Sgd, TrainConfig};
pub use weights::{LossWeightMatrix, WeightKind};

/// Default `γ` for the descend/ascend weightings.
pub const DEFAULT_GAMMA: f64 = 1.2;
