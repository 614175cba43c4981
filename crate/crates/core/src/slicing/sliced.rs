use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::SliceId;
use crate::error::{Error, Result};
use crate::nested::eval::{self, Act, BlockOps};
use crate::nested::{ArchDescriptor, ConvBn, GroupSpec, NestedModel};
use crate::numerics::{BatchNorm, CumulativeLinear, NoProbe, PackedConv, Probe, Scalar, Tensor};

/// Dense convolution plus its frozen normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedConvBn<S> {
    pub conv: PackedConv<S>,
    pub bn: BatchNorm<S>,
}

impl<S: Scalar> SlicedConvBn<S> {
    fn from_full(cb: &ConvBn<S>, out_channels: usize, name: &str) -> Result<Self> {
        let conv = PackedConv::from_masked(cb.layer.kernel(), out_channels)
            .ok_or_else(|| Error::NonCausalMask { layer: name.into() })?;
        Ok(SlicedConvBn {
            conv,
            bn: cb.bn.truncated(out_channels),
        })
    }

    fn param_count(&self) -> usize {
        self.conv.weights().len() + 2 * self.bn.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedBlock<S> {
    pub conv1: SlicedConvBn<S>,
    pub conv2: SlicedConvBn<S>,
    pub shortcut: Option<SlicedConvBn<S>>,
}

impl<S: Scalar> SlicedBlock<S> {
    fn ops(&self) -> BlockOps<'_, S, PackedConv<S>> {
        BlockOps {
            conv1: (&self.conv1.conv, &self.conv1.bn),
            conv2: (&self.conv2.conv, &self.conv2.bn),
            shortcut: self.shortcut.as_ref().map(|s| (&s.conv, &s.bn)),
        }
    }
}

/// Standalone network for slice `(d, w)`: the stem and the blocks of layer
/// groups `1..=d`, each holding only the channels of groups `1..=w`, with
/// head `(d, w)` as its single classifier.
///
/// Weights are stored densely (no masked entries) and normalization uses the
/// frozen running statistics of the retained channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedModel<S> {
    id: SliceId,
    arch: ArchDescriptor,
    groups: GroupSpec,
    stem: SlicedConvBn<S>,
    blocks: Vec<SlicedBlock<S>>,
    head: CumulativeLinear<S>,
}

/// Extracts slice `id` from a frozen model.
pub fn slice<S: Scalar>(model: &NestedModel<S>, id: SliceId) -> Result<SlicedModel<S>> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let id = SliceId::new(id.d, id.w, model.layers(), model.groups())?;
    for (name, layer) in model.layers_named() {
        if !layer.mask_is_causal() {
            return Err(Error::NonCausalMask { layer: name });
        }
    }
    let groups = model.group_spec();
    let last_pos = model.site_positions()[id.d - 1];
    let stem = SlicedConvBn::from_full(model.stem(), groups.retained(0, id.w), "stem.conv")?;
    let mut blocks = Vec::with_capacity(last_pos);
    for (i, b) in model.blocks()[..last_pos].iter().enumerate() {
        let out = groups.retained(b.stage(), id.w);
        blocks.push(SlicedBlock {
            conv1: SlicedConvBn::from_full(&b.conv1, out, &format!("blocks.{i}.conv1"))?,
            conv2: SlicedConvBn::from_full(&b.conv2, out, &format!("blocks.{i}.conv2"))?,
            shortcut: b
                .shortcut
                .as_ref()
                .map(|s| SlicedConvBn::from_full(s, out, &format!("blocks.{i}.shortcut")))
                .transpose()?,
        });
    }
    let head = model.heads()[id.d - 1].truncated(groups.retained(model.site_stage(id.d), id.w));
    Ok(SlicedModel {
        id,
        arch: model.arch().clone(),
        groups: groups.clone(),
        stem,
        blocks,
        head,
    })
}

impl<S: Scalar> SlicedModel<S> {
    /// Reassembles a slice from stored parts, checking that every shape is
    /// the one slice `id` of `arch` has.
    pub fn from_parts(
        id: SliceId,
        arch: ArchDescriptor,
        groups: GroupSpec,
        stem: SlicedConvBn<S>,
        blocks: Vec<SlicedBlock<S>>,
        head: CumulativeLinear<S>,
    ) -> Result<Self> {
        arch.validate()?;
        let sites = arch.site_positions();
        let id = SliceId::new(id.d, id.w, sites.len(), arch.groups)?;
        if groups.groups() != arch.groups || groups.stages() != arch.stages.len() {
            return Err(Error::InvalidBoundaries("group spec does not match the architecture".into()));
        }
        let bad = |what: &str| Err(Error::InvalidArch(format!("sliced model: {what}")));
        let last_pos = sites[id.d - 1];
        if blocks.len() != last_pos {
            return bad("block count does not match the slice depth");
        }
        let check = |cb: &SlicedConvBn<S>, in_ch: usize, out_ch: usize, k: usize| {
            cb.conv.out_channels() == out_ch
                && cb.bn.channels() == out_ch
                && cb.conv.kernel_size() == k
                && cb.conv.row_in().iter().all(|&n| n <= in_ch)
        };
        let k = arch.kernel;
        let mut ch = groups.retained(0, id.w);
        if !check(&stem, arch.input_channels, ch, k) {
            return bad("stem shape");
        }
        let stages = arch.block_stages();
        for (b, &stage) in blocks.iter().zip(&stages) {
            let out = groups.retained(stage, id.w);
            let ok = check(&b.conv1, ch, out, k)
                && check(&b.conv2, out, out, k)
                && match &b.shortcut {
                    Some(s) => check(s, ch, out, 1),
                    None => ch == out,
                };
            if !ok {
                return bad("block shape");
            }
            ch = out;
        }
        if head.features() != ch || head.classes() != arch.classes || head.bias.len() != arch.classes {
            return bad("head shape");
        }
        Ok(SlicedModel {
            id,
            arch,
            groups,
            stem,
            blocks,
            head,
        })
    }

    pub fn id(&self) -> SliceId {
        self.id
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn group_spec(&self) -> &GroupSpec {
        &self.groups
    }

    pub fn stem(&self) -> &SlicedConvBn<S> {
        &self.stem
    }

    pub fn blocks(&self) -> &[SlicedBlock<S>] {
        &self.blocks
    }

    pub fn head(&self) -> &CumulativeLinear<S> {
        &self.head
    }

    /// Trainable scalars: convolution weights, normalization scale and
    /// shift, classifier weight and bias.
    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.conv1.param_count() + b.conv2.param_count() + b.shortcut.as_ref().map_or(0, |s| s.param_count())
            })
            .sum();
        self.stem.param_count() + blocks + self.head.weight.len() + self.head.bias.len()
    }

    /// Logits `[batch, classes]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_probed(x, &mut NoProbe)
    }

    pub fn forward_probed<P: Probe>(&self, x: &Tensor<S>, probe: &mut P) -> Result<Tensor<S>> {
        if x.shape().len() != 4 || x.shape()[1] != self.arch.input_channels {
            return Err(Error::ShapeMismatch {
                op: "SlicedModel::forward",
                left: x.shape().to_vec(),
                right: vec![0, self.arch.input_channels, 0, 0],
            });
        }
        let [b, c, h, w] = x.dims4();
        let input = Act {
            data: x.data().to_vec(),
            batch: b,
            channels: c,
            h,
            w,
        };
        probe.alloc(input.per_sample());
        let stem_out = self.stem.conv.out_channels();
        let mut act = eval::conv_bn(&self.stem.conv, &self.stem.bn, &input, stem_out, true, probe)?;
        probe.free(input.per_sample());
        drop(input);
        for block in &self.blocks {
            let out = block.conv1.conv.out_channels();
            act = eval::residual_block(block.ops(), act, out, probe)?;
        }
        let logits = eval::head(&self.head, &act, &[self.head.features()], true, probe)?;
        Tensor::from_vec(&[b, self.arch.classes], logits)
    }
}
