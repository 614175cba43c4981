//! Inference building blocks shared by [`NestedModel`](super::NestedModel)
//! and [`SlicedModel`](crate::slicing::SlicedModel).
//!
//! Both models call these functions and differ only in the convolution
//! storage behind [`ConvOp`]. The memory accounting sent to the probe follows
//! the schedule the analytic cost model assumes: a layer's output is
//! allocated while its input is live, and inputs are released as soon as the
//! last consumer ran.

use alloc::vec::Vec;

use crate::error::Result;
use crate::numerics::{
    cumulative_logits, relu_in_place, BatchNorm, ConvGeometry, CumulativeLinear, MaskedConvKernel, PackedConv, Probe,
    Scalar,
};

/// An activation map `[batch, channels, h, w]` in flat storage.
#[derive(Debug, Clone)]
pub(crate) struct Act<S> {
    pub data: Vec<S>,
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl<S> Act<S> {
    pub fn per_sample(&self) -> usize {
        self.channels * self.h * self.w
    }
}

pub(crate) trait ConvOp<S: Scalar> {
    fn run<P: Probe>(&self, x: &Act<S>, out_channels: usize, probe: &mut P) -> Result<(Vec<S>, ConvGeometry)>;
}

impl<S: Scalar> ConvOp<S> for MaskedConvKernel<S> {
    fn run<P: Probe>(&self, x: &Act<S>, out_channels: usize, probe: &mut P) -> Result<(Vec<S>, ConvGeometry)> {
        self.forward_limited(&x.data, x.batch, x.channels, (x.h, x.w), out_channels, probe)
    }
}

impl<S: Scalar> ConvOp<S> for PackedConv<S> {
    fn run<P: Probe>(&self, x: &Act<S>, out_channels: usize, probe: &mut P) -> Result<(Vec<S>, ConvGeometry)> {
        debug_assert_eq!(out_channels, self.out_channels());
        self.forward(&x.data, x.batch, x.channels, (x.h, x.w), probe)
    }
}

/// Convolution, inference-mode batch norm and optional ReLU. Allocates the
/// output; the caller owns the input's lifetime.
pub(crate) fn conv_bn<S: Scalar, C: ConvOp<S>, P: Probe>(
    conv: &C,
    bn: &BatchNorm<S>,
    x: &Act<S>,
    out_channels: usize,
    relu: bool,
    probe: &mut P,
) -> Result<Act<S>> {
    let (mut y, g) = conv.run(x, out_channels, probe)?;
    probe.alloc(out_channels * g.out_h * g.out_w);
    bn.forward_eval(&mut y, x.batch, out_channels, g.out_h * g.out_w);
    if relu {
        relu_in_place(&mut y);
    }
    Ok(Act {
        data: y,
        batch: x.batch,
        channels: out_channels,
        h: g.out_h,
        w: g.out_w,
    })
}

pub(crate) struct BlockOps<'a, S, C> {
    pub conv1: (&'a C, &'a BatchNorm<S>),
    pub conv2: (&'a C, &'a BatchNorm<S>),
    pub shortcut: Option<(&'a C, &'a BatchNorm<S>)>,
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`; consumes `x`.
pub(crate) fn residual_block<S: Scalar, C: ConvOp<S>, P: Probe>(
    ops: BlockOps<'_, S, C>,
    x: Act<S>,
    out_channels: usize,
    probe: &mut P,
) -> Result<Act<S>> {
    let h1 = conv_bn(ops.conv1.0, ops.conv1.1, &x, out_channels, true, probe)?;
    let mut h2 = conv_bn(ops.conv2.0, ops.conv2.1, &h1, out_channels, false, probe)?;
    probe.free(h1.per_sample());
    drop(h1);
    match ops.shortcut {
        Some((conv, bn)) => {
            let s = conv_bn(conv, bn, &x, out_channels, false, probe)?;
            probe.free(x.per_sample());
            add_in_place(&mut h2.data, &s.data);
            probe.free(s.per_sample());
        }
        None => {
            debug_assert_eq!(x.channels, out_channels);
            add_in_place(&mut h2.data, &x.data);
            probe.free(x.per_sample());
        }
    }
    relu_in_place(&mut h2.data);
    Ok(h2)
}

fn add_in_place<S: Scalar>(acc: &mut [S], other: &[S]) {
    debug_assert_eq!(acc.len(), other.len());
    for (a, &b) in acc.iter_mut().zip(other) {
        *a = *a + b;
    }
}

/// Pools `x` and evaluates the cumulative heads for `bounds`. Returns logits
/// `[bounds.len(), batch, classes]`. When `last` is set, `x` is released
/// before the logits are allocated.
pub(crate) fn head<S: Scalar, P: Probe>(
    linear: &CumulativeLinear<S>,
    x: &Act<S>,
    bounds: &[usize],
    last: bool,
    probe: &mut P,
) -> Result<Vec<S>> {
    let pooled = crate::numerics::pool_raw(&x.data, x.batch * x.channels, x.h * x.w);
    probe.alloc(x.channels);
    if last {
        probe.free(x.per_sample());
    }
    let logits = cumulative_logits(linear, &pooled, x.batch, x.channels, bounds, probe)?;
    probe.alloc(bounds.len() * linear.classes());
    probe.free(x.channels);
    Ok(logits)
}
