//! Minimal dense-tensor engine.
//!
//! Only the operations the nested model needs are provided, each with an
//! explicit forward and backward function. There is no general autodiff
//! graph: the model composes these functions and records what it needs for
//! its own reverse pass.
//!
//! Summation order is part of the contract. Every reduction runs in a fixed
//! loop order (documented per op) so that repeated calls, and the masked vs.
//! sliced code paths, produce bit-identical results.

mod conv;
mod gradcheck;
mod linear;
mod loss;
mod norm;
mod pool;
mod probe;
mod rng;
mod scalar;
mod tensor;

pub use conv::{
    conv2d_masked, conv2d_masked_backward, conv_output_hw, BinaryMask, ConvGeometry,
    MaskedConvKernel, PackedConv,
};
pub use gradcheck::{fd_gradient_check, GradCheckReport, ParamError};
pub use linear::{cumulative_logits, cumulative_logits_backward, CumulativeLinear};
pub use loss::{softmax_cross_entropy, CrossEntropy};
pub use norm::{BatchNorm, BatchNormCache};
pub use pool::{global_avg_pool, global_avg_pool_backward};
pub use probe::{ConvEvent, NoProbe, OpCounter, Probe};
pub(crate) use loss::{argmax, cross_entropy_raw};
pub(crate) use pool::pool_raw;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Elementwise rectified linear unit, in place.
pub fn relu_in_place<S: Scalar>(data: &mut [S]) {
    for v in data {
        if !(*v > S::zero()) {
            *v = S::zero();
        }
    }
}

/// Zeroes `grad` wherever the (post-activation) output was not positive.
pub fn relu_backward_in_place<S: Scalar>(output: &[S], grad: &mut [S]) {
    debug_assert_eq!(output.len(), grad.len());
    for (g, &o) in grad.iter_mut().zip(output) {
        if !(o > S::zero()) {
            *g = S::zero();
        }
    }
}
