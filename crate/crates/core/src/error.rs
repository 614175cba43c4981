use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("group count mismatch: {left} vs {right}")]
    GroupCountMismatch { left: usize, right: usize },

    #[error("stage {stage} has width {width}, not divisible into {groups} groups (nearest valid widths: {lower}, {upper})")]
    IndivisibleWidth {
        stage: usize,
        width: usize,
        groups: usize,
        lower: usize,
        upper: usize,
    },

    #[error("invalid group boundaries: {0}")]
    InvalidBoundaries(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("head ({l}, {c}) out of range for a {layers}x{groups} grid")]
    HeadOutOfRange {
        l: usize,
        c: usize,
        layers: usize,
        groups: usize,
    },

    #[error("loss weights sum to zero")]
    ZeroWeightSum,

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("gamma must be larger than one, got {0}")]
    GammaNotAboveOne(f64),

    #[error("backward called without a recorded forward pass")]
    NoForwardPass,

    #[error("model is not frozen; freeze it before slicing")]
    NotFrozen,

    #[error("kernel mask of {layer} is not channel-causal")]
    NonCausalMask { layer: String },

    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("parameter tensor {name}: {reason}")]
    BadParameter { name: String, reason: String },
}
