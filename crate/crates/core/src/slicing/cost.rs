use alloc::vec;
use alloc::vec::Vec;

use super::SliceId;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nested::{ArchDescriptor, GroupSpec};

/// Resource needs of one slice for a single input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SliceCost {
    /// Trainable scalars (normalization running statistics excluded).
    pub params: u64,
    /// Multiply-accumulates of one forward pass. Every kernel tap counts at
    /// every output pixel, including taps that fall on zero padding.
    pub macs: u64,
    /// Maximum number of activation scalars live at once during a
    /// layer-by-layer forward pass that frees each tensor after its last use.
    pub peak_activation: u64,
}

struct Memory {
    live: u64,
    peak: u64,
}

impl Memory {
    fn alloc(&mut self, n: u64) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, n: u64) {
        self.live -= n;
    }
}

/// Weights of a causal convolution restricted to the first `w` output
/// groups: output group `g` reads `in_bounds[g]` input channels.
fn conv_weights(in_bounds: &[usize], out_bounds: &[usize], k: usize, w: usize) -> u64 {
    let mut prev = 0;
    let mut total = 0;
    for g in 0..w {
        total += (out_bounds[g] - prev) * in_bounds[g] * k * k;
        prev = out_bounds[g];
    }
    total as u64
}

fn out_size(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Closed-form cost of slice `id` at `input_hw × input_hw` resolution.
pub fn cost(arch: &ArchDescriptor, groups: &GroupSpec, id: SliceId, input_hw: usize) -> Result<SliceCost> {
    arch.validate()?;
    let sites = arch.site_positions();
    let id = SliceId::new(id.d, id.w, sites.len(), arch.groups)?;
    if groups.groups() != arch.groups || groups.stages() != arch.stages.len() {
        return Err(Error::GroupCountMismatch {
            left: arch.groups,
            right: groups.groups(),
        });
    }
    if input_hw == 0 {
        return Err(Error::InvalidArch("input size must be positive".into()));
    }
    let (k, w) = (arch.kernel, id.w);
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut mem = Memory { live: 0, peak: 0 };

    let image = vec![arch.input_channels; arch.groups];
    let mut hw = out_size(input_hw, k, 1);
    let mut ch = groups.retained(0, w) as u64;
    let weights = conv_weights(&image, groups.bounds(0), k, w);
    params += weights + 2 * ch;
    macs += weights * (hw * hw) as u64;
    mem.alloc((arch.input_channels * input_hw * input_hw) as u64);
    mem.alloc(ch * (hw * hw) as u64);
    mem.free((arch.input_channels * input_hw * input_hw) as u64);

    let last_pos = sites[id.d - 1];
    let stages: Vec<usize> = arch.block_stages();
    let mut prev = 0;
    for &stage in &stages[..last_pos] {
        let (inb, outb) = (groups.bounds(prev), groups.bounds(stage));
        let stride = if stage != prev { 2 } else { 1 };
        let out_hw = out_size(hw, k, stride);
        let plane = (out_hw * out_hw) as u64;
        let out = outb[w - 1] as u64;
        let x = ch * (hw * hw) as u64;

        let w1 = conv_weights(inb, outb, k, w);
        let w2 = conv_weights(outb, outb, k, w);
        params += w1 + w2 + 4 * out;
        macs += (w1 + w2) * plane;
        mem.alloc(out * plane);
        mem.alloc(out * plane);
        mem.free(out * plane);
        if stage != prev {
            let ws = conv_weights(inb, outb, 1, w);
            let s_hw = out_size(hw, 1, stride);
            params += ws + 2 * out;
            macs += ws * (s_hw * s_hw) as u64;
            mem.alloc(out * (s_hw * s_hw) as u64);
            mem.free(x);
            mem.free(out * (s_hw * s_hw) as u64);
        } else {
            mem.free(x);
        }
        ch = out;
        hw = out_hw;
        prev = stage;
    }

    let n = arch.classes as u64;
    params += n * ch + n;
    macs += n * ch;
    mem.alloc(ch);
    mem.free(ch * (hw * hw) as u64);
    mem.alloc(n);
    mem.free(ch);

    Ok(SliceCost {
        params,
        macs,
        peak_activation: mem.peak,
    })
}

/// Costs of every slice; entry `(d-1, w-1)` holds slice `(d, w)`.
pub fn cost_table(arch: &ArchDescriptor, groups: &GroupSpec, input_hw: usize) -> Result<Grid<SliceCost>> {
    let layers = arch.layer_groups();
    let mut out = Vec::with_capacity(layers * arch.groups);
    for d in 1..=layers {
        for w in 1..=arch.groups {
            out.push(cost(arch, groups, SliceId { d, w }, input_hw)?);
        }
    }
    Ok(Grid::from_vec(layers, arch.groups, out).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_weight_counts() {
        // 4 → 4 channels in 2 + 2 groups, 3×3: 2·2·9 + 2·4·9 weights.
        assert_eq!(conv_weights(&[2, 4], &[2, 4], 3, 2), (2 * 2 + 2 * 4) * 9);
        assert_eq!(conv_weights(&[2, 4], &[2, 4], 3, 1), 2 * 2 * 9);
        assert_eq!(conv_weights(&[3, 3], &[2, 4], 3, 2), 4 * 3 * 9);
    }

    #[test]
    fn monotone_on_toy_grid() {
        let arch = ArchDescriptor::toy(3);
        let groups = GroupSpec::proportional(&arch.stages, arch.groups).unwrap();
        let t = cost_table(&arch, &groups, 8).unwrap();
        for d in 0..t.rows() {
            for w in 0..t.cols() {
                let c = t[(d, w)];
                if d + 1 < t.rows() {
                    let n = t[(d + 1, w)];
                    assert!(n.params >= c.params && n.macs >= c.macs && n.peak_activation >= c.peak_activation);
                }
                if w + 1 < t.cols() {
                    let n = t[(d, w + 1)];
                    assert!(n.params >= c.params && n.macs >= c.macs && n.peak_activation >= c.peak_activation);
                }
            }
        }
    }
}
