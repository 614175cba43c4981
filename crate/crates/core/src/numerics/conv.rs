use alloc::vec;
use alloc::vec::Vec;

use super::{Probe, Scalar, Tensor};
use crate::error::{Error, Result};

/// Binary mask with the same `[out, in, k, k]` layout as a kernel's weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: [usize; 4],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let [co, ci, kh, kw] = shape;
        let mut bits = Vec::with_capacity(co * ci * kh * kw);
        for o in 0..co {
            for i in 0..ci {
                for y in 0..kh {
                    for x in 0..kw {
                        bits.push(f(o, i, y, x));
                    }
                }
            }
        }
        BinaryMask { shape, bits }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> bool {
        let [_, ci, kh, kw] = self.shape;
        self.bits[((o * ci + i) * kh + y) * kw + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of leading input channels output channel `o` is connected to,
    /// if its connections form a prefix `0..n` (all taps set for `i < n`,
    /// none for `i >= n`). `None` for any other pattern.
    pub fn prefix_len(&self, o: usize) -> Option<usize> {
        let [_, ci, kh, kw] = self.shape;
        let taps = kh * kw;
        let row = &self.bits[o * ci * taps..(o + 1) * ci * taps];
        let mut n = 0;
        while n < ci && row[n * taps..(n + 1) * taps].iter().all(|&b| b) {
            n += 1;
        }
        row[n * taps..].iter().all(|&b| !b).then_some(n)
    }
}

/// Convolution weights with an immutable binary mask.
///
/// Reads always see `weights ⊙ mask`: masked taps are skipped in the forward
/// pass and receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConvKernel<S> {
    weights: Tensor<S>,
    mask: BinaryMask,
    stride: usize,
    padding: usize,
}

impl<S: Scalar> MaskedConvKernel<S> {
    pub fn new(weights: Tensor<S>, mask: BinaryMask, stride: usize, padding: usize) -> Result<Self> {
        if weights.shape().len() != 4 || weights.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "MaskedConvKernel::new",
                left: weights.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let [_, _, kh, kw] = mask.shape();
        if kh != kw {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "kernel must be square",
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "stride must be positive",
            });
        }
        Ok(MaskedConvKernel {
            weights,
            mask,
            stride,
            padding,
        })
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    /// Raw weight storage; masked positions may hold anything and are never read.
    pub fn weights_mut(&mut self) -> &mut Tensor<S> {
        &mut self.weights
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.mask.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.mask.shape[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.mask.shape[2]
    }

    pub fn effective_weights(&self) -> Tensor<S> {
        let data = self
            .weights
            .data()
            .iter()
            .zip(&self.mask.bits)
            .map(|(&w, &m)| if m { w } else { S::zero() })
            .collect();
        Tensor::from_vec(self.weights.shape(), data).expect("same shape")
    }

    /// Convolves the first `out_channels` output channels of `input`, which
    /// may hold fewer channels than the kernel expects; input channels beyond
    /// `in_available` are never read. Output is `[B, out_channels, H', W']`.
    pub(crate) fn forward_limited<P: Probe>(
        &self,
        input: &[S],
        batch: usize,
        in_available: usize,
        hw: (usize, usize),
        out_channels: usize,
        probe: &mut P,
    ) -> Result<(Vec<S>, ConvGeometry)> {
        let g = ConvGeometry::new(hw, self.kernel_size(), self.stride, self.padding)?;
        let [_, ci, k, _] = self.mask.shape;
        let in_plane = g.in_h * g.in_w;
        let out_plane = g.out_h * g.out_w;
        let readable = ci.min(in_available);
        let mut out = vec![S::zero(); batch * out_channels * out_plane];
        let w = self.weights.data();
        let mut taps = 0u64;
        let mut max_read = 0;
        for b in 0..batch {
            for o in 0..out_channels {
                let dst = &mut out[(b * out_channels + o) * out_plane..][..out_plane];
                for i in 0..readable {
                    let base = (o * ci + i) * k * k;
                    let enabled = &self.mask.bits[base..base + k * k];
                    let on = enabled.iter().filter(|&&m| m).count();
                    if on == 0 {
                        continue;
                    }
                    if b == 0 {
                        taps += on as u64;
                        max_read = max_read.max(i + 1);
                    }
                    let src = &input[(b * in_available + i) * in_plane..][..in_plane];
                    let full = on == k * k;
                    accumulate_channel(dst, src, &w[base..base + k * k], (!full).then_some(enabled), &g);
                }
            }
        }
        probe.conv(out_channels, max_read, taps * (batch * out_plane) as u64);
        Ok((out, g))
    }
}

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(hw: (usize, usize), k: usize, stride: usize, padding: usize) -> Result<Self> {
        let (out_h, out_w) = conv_output_hw(hw, k, stride, padding).ok_or(Error::InvalidShape {
            shape: vec![hw.0, hw.1],
            reason: "kernel larger than padded input",
        })?;
        Ok(ConvGeometry {
            in_h: hw.0,
            in_w: hw.1,
            out_h,
            out_w,
            k,
            stride,
            padding,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding` is in bounds.
    fn valid_range(&self, kx: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // ox * s + kx >= p  and  ox * s + kx - p < in_len
        let lo = if kx >= self.padding {
            0
        } else {
            (self.padding - kx).div_ceil(self.stride)
        };
        let limit = in_len + self.padding;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// `H' = floor((H + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_hw(hw: (usize, usize), k: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let dim = |n: usize| (n + 2 * padding).checked_sub(k).map(|r| r / stride + 1);
    Some((dim(hw.0)?, dim(hw.1)?))
}

/// Adds the contribution of one input channel to an output plane.
///
/// `taps` holds the `k × k` kernel of this (output, input) channel pair and
/// `enabled`, when present, says which taps to use. Both the masked and the
/// packed convolution route every input channel through this function in
/// increasing channel order, and within it every output element receives
/// its taps in (kernel row, kernel column) order. Each output element
/// therefore sees the same sequence of floating-point additions on either
/// path. Taps over the zero padding are skipped.
#[inline]
fn accumulate_channel<S: Scalar>(dst: &mut [S], src: &[S], taps: &[S], enabled: Option<&[bool]>, g: &ConvGeometry) {
    let k = g.k;
    let mut ranges = [(0usize, 0usize); 16];
    let ranges: &[(usize, usize)] = if k <= ranges.len() {
        for (kx, r) in ranges[..k].iter_mut().enumerate() {
            *r = g.valid_range(kx, g.out_w, g.in_w);
        }
        &ranges[..k]
    } else {
        &[]
    };
    for oy in 0..g.out_h {
        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
        for ky in 0..k {
            let iy = oy * g.stride + ky;
            if iy < g.padding || iy - g.padding >= g.in_h {
                continue;
            }
            let srow = &src[(iy - g.padding) * g.in_w..][..g.in_w];
            for kx in 0..k {
                let t = ky * k + kx;
                if enabled.is_some_and(|e| !e[t]) {
                    continue;
                }
                let (x_lo, x_hi) = match ranges.get(kx) {
                    Some(&r) => r,
                    None => g.valid_range(kx, g.out_w, g.in_w),
                };
                if x_lo >= x_hi {
                    continue;
                }
                let w = taps[t];
                let ix0 = x_lo * g.stride + kx - g.padding;
                let d = &mut drow[x_lo..x_hi];
                if g.stride == 1 {
                    for (d, &s) in d.iter_mut().zip(&srow[ix0..]) {
                        *d = *d + w * s;
                    }
                } else {
                    for (d, &s) in d.iter_mut().zip(srow[ix0..].iter().step_by(g.stride)) {
                        *d = *d + w * s;
                    }
                }
            }
        }
    }
}

/// Masked 2-D cross-correlation of `[B, Cin, H, W]` with `weights ⊙ mask`.
///
/// Each output element is accumulated from zero over input channels, then
/// kernel rows, then kernel columns; taps outside the zero-padded border and
/// masked taps are skipped.
pub fn conv2d_masked<S: Scalar>(input: &Tensor<S>, kernel: &MaskedConvKernel<S>) -> Result<Tensor<S>> {
    conv2d_masked_probed(input, kernel, &mut super::NoProbe)
}

pub(crate) fn conv2d_masked_probed<S: Scalar, P: Probe>(
    input: &Tensor<S>,
    kernel: &MaskedConvKernel<S>,
    probe: &mut P,
) -> Result<Tensor<S>> {
    if input.shape().len() != 4 || input.shape()[1] != kernel.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_masked",
            left: input.shape().to_vec(),
            right: kernel.weights().shape().to_vec(),
        });
    }
    let [b, c, h, w] = input.dims4();
    let (out, g) = kernel.forward_limited(input.data(), b, c, (h, w), kernel.out_channels(), probe)?;
    Tensor::from_vec(&[b, kernel.out_channels(), g.out_h, g.out_w], out)
}

/// Reverse pass of [`conv2d_masked`].
///
/// Returns the input gradient (when `need_input_grad`) and the weight
/// gradient. Masked positions of the weight gradient are exactly zero.
pub fn conv2d_masked_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &MaskedConvKernel<S>,
    grad_out: &Tensor<S>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<S>>, Tensor<S>)> {
    let [b, ci, h, w] = input.dims4();
    let g = ConvGeometry::new((h, w), kernel.kernel_size(), kernel.stride, kernel.padding)?;
    let co = kernel.out_channels();
    if ci != kernel.in_channels() || grad_out.shape() != [b, co, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_masked_backward",
            left: grad_out.shape().to_vec(),
            right: [b, co, g.out_h, g.out_w].to_vec(),
        });
    }
    let k = g.k;
    let in_plane = h * w;
    let out_plane = g.out_h * g.out_w;
    let x = input.data();
    let dy = grad_out.data();
    let wts = kernel.weights.data();
    let mut dw = vec![S::zero(); wts.len()];
    let mut dx = need_input_grad.then(|| vec![S::zero(); x.len()]);

    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| g.valid_range(kx, g.out_w, w)).collect();
    let kk = k * k;
    for o in 0..co {
        for i in 0..ci {
            let base = (o * ci + i) * kk;
            let enabled = &kernel.mask.bits[base..base + kk];
            if !enabled.iter().any(|&m| m) {
                continue;
            }
            let taps = &wts[base..base + kk];
            let acc = &mut dw[base..base + kk];
            for bi in 0..b {
                let src = &x[(bi * ci + i) * in_plane..][..in_plane];
                let grad = &dy[(bi * co + o) * out_plane..][..out_plane];
                let mut dst = dx.as_mut().map(|d| &mut d[(bi * ci + i) * in_plane..][..in_plane]);
                for oy in 0..g.out_h {
                    let grow = &grad[oy * g.out_w..][..g.out_w];
                    for ky in 0..k {
                        let iy = oy * g.stride + ky;
                        if iy < g.padding || iy - g.padding >= h {
                            continue;
                        }
                        let row_start = (iy - g.padding) * w;
                        for (kx, &(x_lo, x_hi)) in ranges.iter().enumerate() {
                            let t = ky * k + kx;
                            if !enabled[t] || x_lo >= x_hi {
                                continue;
                            }
                            let ix0 = row_start + x_lo * g.stride + kx - g.padding;
                            let gs = &grow[x_lo..x_hi];
                            let mut sum = S::zero();
                            for (&gv, &sv) in gs.iter().zip(src[ix0..].iter().step_by(g.stride)) {
                                sum = sum + gv * sv;
                            }
                            acc[t] = acc[t] + sum;
                            if let Some(d) = dst.as_deref_mut() {
                                let wv = taps[t];
                                for (dv, &gv) in d[ix0..].iter_mut().step_by(g.stride).zip(gs) {
                                    *dv = *dv + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = dx.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?;
    Ok((dx, Tensor::from_vec(kernel.weights.shape(), dw)?))
}

/// Convolution with only the unmasked taps stored.
///
/// Output channel `o` is connected to input channels `0..row_in[o]`; its
/// weights are stored contiguously as `[row_in[o], k, k]`. This is the
/// deployed form of a channel-causal kernel, holding no zero-by-construction
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedConv<S> {
    row_in: Vec<usize>,
    row_offset: Vec<usize>,
    weights: Vec<S>,
    k: usize,
    stride: usize,
    padding: usize,
}

impl<S: Scalar> PackedConv<S> {
    /// Packs the first `out_channels` rows of a prefix-masked kernel.
    pub fn from_masked(kernel: &MaskedConvKernel<S>, out_channels: usize) -> Option<Self> {
        let [_, ci, k, _] = kernel.mask.shape;
        let taps = k * k;
        let mut row_in = Vec::with_capacity(out_channels);
        let mut weights = Vec::new();
        for o in 0..out_channels {
            let n = kernel.mask.prefix_len(o)?;
            let start = o * ci * taps;
            weights.extend_from_slice(&kernel.weights.data()[start..start + n * taps]);
            row_in.push(n);
        }
        Some(Self::assemble(row_in, weights, k, kernel.stride, kernel.padding))
    }

    /// Rebuilds from stored parts; `weights.len()` must equal `Σ row_in · k²`.
    pub fn from_parts(row_in: Vec<usize>, weights: Vec<S>, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let expected: usize = row_in.iter().map(|n| n * k * k).sum();
        if expected != weights.len() || stride == 0 || k == 0 {
            return Err(Error::ShapeMismatch {
                op: "PackedConv::from_parts",
                left: vec![expected],
                right: vec![weights.len()],
            });
        }
        Ok(Self::assemble(row_in, weights, k, stride, padding))
    }

    fn assemble(row_in: Vec<usize>, weights: Vec<S>, k: usize, stride: usize, padding: usize) -> Self {
        let mut row_offset = Vec::with_capacity(row_in.len());
        let mut off = 0;
        for &n in &row_in {
            row_offset.push(off);
            off += n * k * k;
        }
        PackedConv {
            row_in,
            row_offset,
            weights,
            k,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.row_in.len()
    }

    pub fn row_in(&self) -> &[usize] {
        &self.row_in
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Forward over `[batch, in_channels, H, W]` data; same summation order
    /// as [`conv2d_masked`].
    pub fn forward<P: Probe>(
        &self,
        input: &[S],
        batch: usize,
        in_channels: usize,
        hw: (usize, usize),
        probe: &mut P,
    ) -> Result<(Vec<S>, ConvGeometry)> {
        let g = ConvGeometry::new(hw, self.k, self.stride, self.padding)?;
        if self.row_in.iter().any(|&n| n > in_channels) || input.len() != batch * in_channels * hw.0 * hw.1 {
            return Err(Error::ShapeMismatch {
                op: "PackedConv::forward",
                left: vec![batch, in_channels, hw.0, hw.1],
                right: vec![self.out_channels(), self.row_in.iter().copied().max().unwrap_or(0), self.k, self.k],
            });
        }
        let co = self.out_channels();
        let in_plane = hw.0 * hw.1;
        let out_plane = g.out_h * g.out_w;
        let mut out = vec![S::zero(); batch * co * out_plane];
        for b in 0..batch {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * out_plane..][..out_plane];
                let row = &self.weights[self.row_offset[o]..];
                let kk = self.k * self.k;
                for i in 0..self.row_in[o] {
                    let src = &input[(b * in_channels + i) * in_plane..][..in_plane];
                    accumulate_channel(dst, src, &row[i * kk..(i + 1) * kk], None, &g);
                }
            }
        }
        let taps = self.weights.len() as u64;
        let read = self.row_in.iter().copied().max().unwrap_or(0);
        probe.conv(co, read, taps * (batch * out_plane) as u64);
        Ok((out, g))
    }
}
