use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::eval::{self, Act, BlockOps};
use super::groups::build_mask;
use super::{ArchDescriptor, GroupSpec, LogitsGrid};
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_masked, conv2d_masked_backward, cumulative_logits_backward, global_avg_pool_backward, pool_raw,
    relu_backward_in_place, relu_in_place, BatchNorm, BatchNormCache, BinaryMask, CumulativeLinear,
    MaskedConvKernel, NoProbe, Probe, Rng, Scalar, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Input convolution; every output group reads the whole image.
    Stem,
    Conv,
    ProjectionShortcut,
}

/// A convolution whose mask follows the channel-group rule
/// `group(in) ≤ group(out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalLayer<S> {
    kernel: MaskedConvKernel<S>,
    in_bounds: Vec<usize>,
    out_bounds: Vec<usize>,
    kind: LayerKind,
}

impl<S: Scalar> CausalLayer<S> {
    /// He-normal initialization scaled by each output channel's unmasked
    /// fan-in; masked positions are stored as zero.
    fn new(
        in_bounds: Vec<usize>,
        out_bounds: Vec<usize>,
        k: usize,
        stride: usize,
        kind: LayerKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mask = build_mask(&in_bounds, &out_bounds, k)?;
        let [co, ci, _, _] = mask.shape();
        let taps = k * k;
        let mut w = vec![S::zero(); co * ci * taps];
        for o in 0..co {
            let fan_in = mask.prefix_len(o).expect("causal masks are prefix-shaped") * taps;
            let std = Float::sqrt(2.0 / fan_in as f64);
            for (j, slot) in w[o * ci * taps..(o + 1) * ci * taps].iter_mut().enumerate() {
                if mask.bits()[o * ci * taps + j] {
                    *slot = S::from_f64(std * rng.normal());
                }
            }
        }
        let weights = Tensor::from_vec(&[co, ci, k, k], w)?;
        Ok(CausalLayer {
            kernel: MaskedConvKernel::new(weights, mask, stride, k / 2)?,
            in_bounds,
            out_bounds,
            kind,
        })
    }

    pub fn kernel(&self) -> &MaskedConvKernel<S> {
        &self.kernel
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<S> {
        self.kernel.weights_mut()
    }

    pub fn in_bounds(&self) -> &[usize] {
        &self.in_bounds
    }

    pub fn out_bounds(&self) -> &[usize] {
        &self.out_bounds
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    /// Swaps in an arbitrary kernel without checking the causal rule. Exists
    /// for negative-control tests of the verification suite.
    pub fn replace_kernel_unchecked(&mut self, kernel: MaskedConvKernel<S>) {
        self.kernel = kernel;
    }

    /// Whether the stored mask equals the one the group rule prescribes.
    pub fn mask_is_causal(&self) -> bool {
        build_mask(&self.in_bounds, &self.out_bounds, self.kernel.kernel_size())
            .map(|m| &m == self.kernel.mask())
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<S> {
    pub layer: CausalLayer<S>,
    pub bn: BatchNorm<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<S> {
    pub conv1: ConvBn<S>,
    pub conv2: ConvBn<S>,
    /// Masked 1×1 projection; present when the block changes stage.
    pub shortcut: Option<ConvBn<S>>,
    stage: usize,
    in_stage: usize,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn in_stage(&self) -> usize {
        self.in_stage
    }

    fn ops(&self) -> BlockOps<'_, S, MaskedConvKernel<S>> {
        BlockOps {
            conv1: (&self.conv1.layer.kernel, &self.conv1.bn),
            conv2: (&self.conv2.layer.kernel, &self.conv2.bn),
            shortcut: self.shortcut.as_ref().map(|s| (&s.layer.kernel, &s.bn)),
        }
    }
}

/// The doubly nested network: a stem, residual blocks partitioned into `L`
/// layer groups by head sites, and one cumulative classifier per site.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedModel<S> {
    arch: ArchDescriptor,
    groups: GroupSpec,
    sites: Vec<usize>,
    stem: ConvBn<S>,
    blocks: Vec<ResidualBlock<S>>,
    heads: Vec<CumulativeLinear<S>>,
    frozen: bool,
}

/// Named view of one trainable tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a, S> {
    pub values: &'a [S],
    /// Connection mask for convolution weights.
    pub mask: Option<&'a BinaryMask>,
}

/// Gradients aligned with [`NestedModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub tensors: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn flat(&self) -> Vec<S> {
        self.tensors.iter().flatten().copied().collect()
    }
}

/// Holds the record of one training-mode forward pass until
/// [`NestedModel::backward`] consumes it.
#[derive(Debug, Default)]
pub struct Tape<S> {
    trace: Option<Trace<S>>,
}

impl<S> Tape<S> {
    pub fn new() -> Self {
        Tape { trace: None }
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }
}

#[derive(Debug)]
struct ConvBnTrace<S> {
    input: Tensor<S>,
    cache: BatchNormCache<S>,
    /// After normalization (and ReLU, when the layer has one).
    output: Tensor<S>,
}

#[derive(Debug)]
struct BlockTrace<S> {
    c1: ConvBnTrace<S>,
    c2: ConvBnTrace<S>,
    shortcut: Option<ConvBnTrace<S>>,
    output: Tensor<S>,
}

#[derive(Debug)]
struct Trace<S> {
    batch: usize,
    stem: ConvBnTrace<S>,
    blocks: Vec<BlockTrace<S>>,
    /// Pooled features `[batch, width]` per head site.
    pooled: Vec<Vec<S>>,
}

impl<S: Scalar> NestedModel<S> {
    /// Builds and initializes a model. Draws from `rng` in a fixed order:
    /// stem, then blocks (conv1, conv2, shortcut), then heads.
    pub fn build(arch: &ArchDescriptor, groups: &GroupSpec, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        if groups.groups() != arch.groups {
            return Err(Error::GroupCountMismatch {
                left: arch.groups,
                right: groups.groups(),
            });
        }
        if groups.stages() != arch.stages.len() || (0..groups.stages()).any(|s| groups.width(s) != arch.stages[s]) {
            return Err(Error::InvalidBoundaries(format!(
                "group boundaries {:?} do not match stage widths {:?}",
                groups.all_bounds(),
                arch.stages
            )));
        }
        let k = arch.kernel;
        let image_bounds = vec![arch.input_channels; arch.groups];
        let stem = ConvBn {
            layer: CausalLayer::new(image_bounds, groups.bounds(0).to_vec(), k, 1, LayerKind::Stem, rng)?,
            bn: BatchNorm::new(groups.width(0)),
        };
        let mut blocks = Vec::with_capacity(arch.num_blocks());
        let mut prev = 0;
        for stage in arch.block_stages() {
            let (inb, outb) = (groups.bounds(prev).to_vec(), groups.bounds(stage).to_vec());
            let stride = if stage != prev { 2 } else { 1 };
            let width = groups.width(stage);
            let conv1 = ConvBn {
                layer: CausalLayer::new(inb.clone(), outb.clone(), k, stride, LayerKind::Conv, rng)?,
                bn: BatchNorm::new(width),
            };
            let conv2 = ConvBn {
                layer: CausalLayer::new(outb.clone(), outb.clone(), k, 1, LayerKind::Conv, rng)?,
                bn: BatchNorm::new(width),
            };
            let shortcut = if stage != prev {
                Some(ConvBn {
                    layer: CausalLayer::new(inb, outb, 1, stride, LayerKind::ProjectionShortcut, rng)?,
                    bn: BatchNorm::new(width),
                })
            } else {
                None
            };
            blocks.push(ResidualBlock {
                conv1,
                conv2,
                shortcut,
                stage,
                in_stage: prev,
            });
            prev = stage;
        }
        let sites = arch.site_positions();
        let heads = sites
            .iter()
            .map(|&p| {
                let f = groups.width(arch.site_stage(p));
                let n = arch.classes;
                let std = Float::sqrt(1.0 / f as f64);
                let w = (0..n * f).map(|_| S::from_f64(std * rng.normal())).collect();
                Ok(CumulativeLinear {
                    weight: Tensor::from_vec(&[n, f], w)?,
                    bias: Tensor::zeros(&[n])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NestedModel {
            arch: arch.clone(),
            groups: groups.clone(),
            sites,
            stem,
            blocks,
            heads,
            frozen: false,
        })
    }

    /// Proportional groups, seeded from `arch.seed`.
    pub fn from_arch(arch: &ArchDescriptor) -> Result<Self> {
        let groups = GroupSpec::proportional(&arch.stages, arch.groups)?;
        Self::build(arch, &groups, &mut Rng::new(arch.seed))
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn group_spec(&self) -> &GroupSpec {
        &self.groups
    }

    /// Layer groups `L`.
    pub fn layers(&self) -> usize {
        self.sites.len()
    }

    /// Channel groups `C`.
    pub fn groups(&self) -> usize {
        self.groups.groups()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn site_positions(&self) -> &[usize] {
        &self.sites
    }

    pub fn stem(&self) -> &ConvBn<S> {
        &self.stem
    }

    pub fn stem_mut(&mut self) -> &mut ConvBn<S> {
        &mut self.stem
    }

    pub fn blocks(&self) -> &[ResidualBlock<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ResidualBlock<S>] {
        &mut self.blocks
    }

    /// The stem and the blocks, borrowed mutably at the same time.
    pub fn stem_and_blocks_mut(&mut self) -> (&mut ConvBn<S>, &mut [ResidualBlock<S>]) {
        (&mut self.stem, &mut self.blocks)
    }

    pub fn heads(&self) -> &[CumulativeLinear<S>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [CumulativeLinear<S>] {
        &mut self.heads
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model as deployed: running statistics are final and slicing
    /// is allowed.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Stage each head site's features come from.
    pub fn site_stage(&self, l: usize) -> usize {
        self.arch.site_stage(self.sites[l - 1])
    }

    /// Every convolution in forward order with a display name.
    pub fn layers_named(&self) -> Vec<(String, &CausalLayer<S>)> {
        let mut out = vec![(String::from("stem.conv"), &self.stem.layer)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1"), &b.conv1.layer));
            out.push((format!("blocks.{i}.conv2"), &b.conv2.layer));
            if let Some(s) = &b.shortcut {
                out.push((format!("blocks.{i}.shortcut"), &s.layer));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let ok = x.shape().len() == 4 && x.shape()[1] == self.arch.input_channels;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "NestedModel::forward",
                left: x.shape().to_vec(),
                right: vec![0, self.arch.input_channels, 0, 0],
            });
        }
        Ok(())
    }

    fn check_head(&self, l: usize, c: usize) -> Result<()> {
        if l == 0 || c == 0 || l > self.layers() || c > self.groups() {
            return Err(Error::HeadOutOfRange {
                l,
                c,
                layers: self.layers(),
                groups: self.groups(),
            });
        }
        Ok(())
    }

    /// Inference-mode pass over layer groups `1..=layers`, computing only
    /// the channels of groups `1..=width`. `perturb(position, act)` runs
    /// after the stem (position 0) and after each block. With `only_last`,
    /// only head `(layers, width)` is evaluated.
    #[allow(clippy::too_many_arguments)]
    fn run_eval<P: Probe>(
        &self,
        x: &Tensor<S>,
        layers: usize,
        width: usize,
        only_last: bool,
        probe: &mut P,
        perturb: &mut dyn FnMut(usize, &mut [S], usize),
    ) -> Result<Vec<Vec<S>>> {
        self.check_input(x)?;
        let [b, c, h, w] = x.dims4();
        let input = Act {
            data: x.data().to_vec(),
            batch: b,
            channels: c,
            h,
            w,
        };
        probe.alloc(input.per_sample());
        let last_pos = self.sites[layers - 1];
        let stem_out = self.groups.retained(0, width);
        let mut act = eval::conv_bn(&self.stem.layer.kernel, &self.stem.bn, &input, stem_out, true, probe)?;
        probe.free(input.per_sample());
        drop(input);
        perturb(0, &mut act.data, act.channels);
        let mut logits = Vec::with_capacity(layers);
        let mut site = 0;
        for pos in 0..=last_pos {
            if pos > 0 {
                let block = &self.blocks[pos - 1];
                let out = self.groups.retained(block.stage, width);
                act = eval::residual_block(block.ops(), act, out, probe)?;
                perturb(pos, &mut act.data, act.channels);
            }
            if self.sites[site] == pos {
                let last = pos == last_pos;
                if last || !only_last {
                    let all = self.groups.bounds(self.arch.site_stage(pos));
                    let bounds = if only_last { &all[width - 1..width] } else { &all[..width] };
                    logits.push(eval::head(&self.heads[site], &act, bounds, last, probe)?);
                }
                site += 1;
            }
        }
        Ok(logits)
    }

    /// Logits of all `L × C` heads (inference mode).
    pub fn forward_grid(&self, x: &Tensor<S>) -> Result<LogitsGrid<S>> {
        self.forward_grid_perturbed(x, &mut |_, _, _| {})
    }

    /// [`forward_grid`](Self::forward_grid) with a hook that may rewrite the
    /// activation map after the stem (position 0) and after every block
    /// (position `k`). The hook receives `[batch, channels, h, w]` data and the
    /// channel count.
    pub fn forward_grid_perturbed(
        &self,
        x: &Tensor<S>,
        perturb: &mut dyn FnMut(usize, &mut [S], usize),
    ) -> Result<LogitsGrid<S>> {
        let sites = self.run_eval(x, self.layers(), self.groups(), false, &mut NoProbe, perturb)?;
        Ok(LogitsGrid::from_sites(sites, self.groups(), x.shape()[0], self.classes()))
    }

    /// Logits of head `(l, c)` alone (1-based). Runs only layer groups
    /// `1..=l` and only the channels of groups `1..=c`; bit-identical to the
    /// corresponding [`forward_grid`](Self::forward_grid) entry.
    pub fn forward_head(&self, x: &Tensor<S>, l: usize, c: usize) -> Result<Tensor<S>> {
        self.forward_head_probed(x, l, c, &mut NoProbe)
    }

    pub fn forward_head_probed<P: Probe>(&self, x: &Tensor<S>, l: usize, c: usize, probe: &mut P) -> Result<Tensor<S>> {
        self.check_head(l, c)?;
        let mut sites = self.run_eval(x, l, c, true, probe, &mut |_, _, _| {})?;
        let site = sites.pop().expect("l >= 1");
        Tensor::from_vec(&[x.shape()[0], self.classes()], site)
    }

    /// Training-mode forward (batch statistics). Records what
    /// [`backward`](Self::backward) needs on `tape` and returns all head logits.
    pub fn forward_train(&self, x: &Tensor<S>, tape: &mut Tape<S>) -> Result<LogitsGrid<S>> {
        self.check_input(x)?;
        let batch = x.shape()[0];
        let stem = conv_bn_train(&self.stem, x.clone(), true)?;
        let mut current = stem.output.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let c1 = conv_bn_train(&block.conv1, current.clone(), true)?;
            let c2 = conv_bn_train(&block.conv2, c1.output.clone(), false)?;
            let shortcut = block
                .shortcut
                .as_ref()
                .map(|s| conv_bn_train(s, current.clone(), false))
                .transpose()?;
            let skip = shortcut.as_ref().map_or(&current, |s| &s.output);
            let mut out = c2.output.clone();
            for (o, &s) in out.data_mut().iter_mut().zip(skip.data()) {
                *o = *o + s;
            }
            relu_in_place(out.data_mut());
            current = out.clone();
            blocks.push(BlockTrace {
                c1,
                c2,
                shortcut,
                output: out,
            });
        }
        let mut pooled = Vec::with_capacity(self.layers());
        let mut logits = Vec::with_capacity(self.layers());
        for (site, &pos) in self.sites.iter().enumerate() {
            let act = if pos == 0 { &stem.output } else { &blocks[pos - 1].output };
            let [_, ch, h, w] = act.dims4();
            let feat = pool_raw(act.data(), batch * ch, h * w);
            let bounds = self.groups.bounds(self.arch.site_stage(pos));
            logits.push(crate::numerics::cumulative_logits(&self.heads[site], &feat, batch, ch, bounds, &mut NoProbe)?);
            pooled.push(feat);
        }
        tape.trace = Some(Trace {
            batch,
            stem,
            blocks,
            pooled,
        });
        Ok(LogitsGrid::from_sites(logits, self.groups(), batch, self.classes()))
    }

    /// Folds the batch statistics of the recorded pass into the running
    /// statistics of every normalization layer.
    pub fn update_running_stats(&mut self, tape: &Tape<S>) -> Result<()> {
        let trace = tape.trace.as_ref().ok_or(Error::NoForwardPass)?;
        let count = |t: &ConvBnTrace<S>| {
            let [b, _, h, w] = t.output.dims4();
            b * h * w
        };
        self.stem.bn.update_running(&trace.stem.cache, count(&trace.stem));
        for (block, bt) in self.blocks.iter_mut().zip(&trace.blocks) {
            block.conv1.bn.update_running(&bt.c1.cache, count(&bt.c1));
            block.conv2.bn.update_running(&bt.c2.cache, count(&bt.c2));
            if let (Some(s), Some(st)) = (block.shortcut.as_mut(), bt.shortcut.as_ref()) {
                s.bn.update_running(&st.cache, count(st));
            }
        }
        Ok(())
    }

    /// Reverse pass for the recorded forward, given the gradient of the loss
    /// with respect to every head's logits. Consumes the recording.
    pub fn backward(&self, tape: &mut Tape<S>, grad_logits: &LogitsGrid<S>) -> Result<Gradients<S>> {
        let trace = tape.trace.take().ok_or(Error::NoForwardPass)?;
        let batch = trace.batch;
        if grad_logits.layers() != self.layers() || grad_logits.groups() != self.groups() || grad_logits.batch() != batch {
            return Err(Error::ShapeMismatch {
                op: "NestedModel::backward",
                left: vec![grad_logits.layers(), grad_logits.groups(), grad_logits.batch()],
                right: vec![self.layers(), self.groups(), batch],
            });
        }
        let mut head_grads = Vec::with_capacity(self.layers());
        let mut site_feat_grads: Vec<Option<Tensor<S>>> = vec![None; self.blocks.len() + 1];
        for (site, &pos) in self.sites.iter().enumerate() {
            let bounds = self.groups.bounds(self.arch.site_stage(pos));
            let (dfeat, dw, db) = cumulative_logits_backward(
                &self.heads[site],
                &trace.pooled[site],
                batch,
                bounds,
                grad_logits.site(site + 1),
            );
            let act = if pos == 0 { &trace.stem.output } else { &trace.blocks[pos - 1].output };
            let [_, ch, h, w] = act.dims4();
            let dfeat = Tensor::from_vec(&[batch, ch], dfeat)?;
            site_feat_grads[pos] = Some(global_avg_pool_backward(&dfeat, (h, w))?);
            head_grads.push((dw, db));
        }

        let mut block_grads: Vec<BlockGrads<S>> = Vec::with_capacity(self.blocks.len());
        let mut d_act: Option<Tensor<S>> = None;
        for pos in (0..=self.blocks.len()).rev() {
            if let Some(g) = site_feat_grads[pos].take() {
                d_act = Some(match d_act {
                    Some(mut acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + v;
                        }
                        acc
                    }
                    None => g,
                });
            }
            let d_out = match d_act.take() {
                Some(d) => d,
                None => {
                    let shape = if pos == 0 {
                        trace.stem.output.shape().to_vec()
                    } else {
                        trace.blocks[pos - 1].output.shape().to_vec()
                    };
                    Tensor::zeros(&shape)?
                }
            };
            if pos == 0 {
                let (_, stem_grads) = conv_bn_backward(&self.stem, &trace.stem, d_out, true, false)?;
                block_grads.reverse();
                return Ok(assemble_grads(stem_grads, block_grads, head_grads));
            }
            let (d_in, grads) = block_backward(&self.blocks[pos - 1], &trace.blocks[pos - 1], d_out)?;
            block_grads.push(grads);
            d_act = Some(d_in);
        }
        unreachable!("position 0 returns")
    }

    /// Trainable tensors in canonical order with names. Order: stem conv
    /// weight, gamma, beta; per block conv1, conv2, shortcut (weight, gamma,
    /// beta each); per head weight, bias.
    pub fn params(&self) -> Vec<(String, ParamRef<'_, S>)> {
        let mut out = Vec::new();
        conv_bn_params("stem", &self.stem, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            conv_bn_params(&format!("blocks.{i}.conv1"), &b.conv1, &mut out);
            conv_bn_params(&format!("blocks.{i}.conv2"), &b.conv2, &mut out);
            if let Some(s) = &b.shortcut {
                conv_bn_params(&format!("blocks.{i}.shortcut"), s, &mut out);
            }
        }
        for (l, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{l}.weight"), ParamRef { values: h.weight.data(), mask: None }));
            out.push((format!("heads.{l}.bias"), ParamRef { values: h.bias.data(), mask: None }));
        }
        out
    }

    /// Mutable trainable tensors in the order of [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        fn cb_mut<'a, S: Scalar>(cb: &'a mut ConvBn<S>, out: &mut Vec<&'a mut [S]>) {
            out.push(cb.layer.kernel.weights_mut().data_mut());
            out.push(&mut cb.bn.gamma);
            out.push(&mut cb.bn.beta);
        }
        cb_mut(&mut self.stem, &mut out);
        for b in &mut self.blocks {
            cb_mut(&mut b.conv1, &mut out);
            cb_mut(&mut b.conv2, &mut out);
            if let Some(s) = &mut b.shortcut {
                cb_mut(s, &mut out);
            }
        }
        for h in &mut self.heads {
            out.push(h.weight.data_mut());
            out.push(h.bias.data_mut());
        }
        out
    }

    /// Normalization running statistics in the order of the normalization
    /// layers (stem, then per block bn1, bn2, shortcut), mean before variance.
    pub fn buffers(&self) -> Vec<(String, &[S])> {
        fn add<'a, S>(out: &mut Vec<(String, &'a [S])>, name: String, bn: &'a BatchNorm<S>) {
            out.push((format!("{name}.running_mean"), bn.running_mean.as_slice()));
            out.push((format!("{name}.running_var"), bn.running_var.as_slice()));
        }
        let mut out = Vec::new();
        add(&mut out, "stem.bn".into(), &self.stem.bn);
        for (i, b) in self.blocks.iter().enumerate() {
            add(&mut out, format!("blocks.{i}.conv1.bn"), &b.conv1.bn);
            add(&mut out, format!("blocks.{i}.conv2.bn"), &b.conv2.bn);
            if let Some(s) = &b.shortcut {
                add(&mut out, format!("blocks.{i}.shortcut.bn"), &s.bn);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        fn add<'a, S: Scalar>(bn: &'a mut BatchNorm<S>, out: &mut Vec<&'a mut [S]>) {
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
        add(&mut self.stem.bn, &mut out);
        for b in &mut self.blocks {
            add(&mut b.conv1.bn, &mut out);
            add(&mut b.conv2.bn, &mut out);
            if let Some(s) = &mut b.shortcut {
                add(&mut s.bn, &mut out);
            }
        }
        out
    }

    /// All trainable scalars concatenated in canonical order.
    pub fn flat_params(&self) -> Vec<S> {
        self.params().iter().flat_map(|(_, p)| p.values.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[S]) -> Result<()> {
        let total: usize = self.params().iter().map(|(_, p)| p.values.len()).sum();
        if total != flat.len() {
            return Err(Error::ShapeMismatch {
                op: "set_flat_params",
                left: vec![total],
                right: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    /// Same model at another precision.
    pub fn convert<T: Scalar>(&self) -> NestedModel<T> {
        let cb = |c: &ConvBn<S>| ConvBn {
            layer: CausalLayer {
                kernel: MaskedConvKernel::new(
                    c.layer.kernel.weights().convert(),
                    c.layer.kernel.mask().clone(),
                    c.layer.kernel.stride(),
                    c.layer.kernel.padding(),
                )
                .expect("valid kernel"),
                in_bounds: c.layer.in_bounds.clone(),
                out_bounds: c.layer.out_bounds.clone(),
                kind: c.layer.kind,
            },
            bn: convert_bn(&c.bn),
        };
        NestedModel {
            arch: self.arch.clone(),
            groups: self.groups.clone(),
            sites: self.sites.clone(),
            stem: cb(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv1: cb(&b.conv1),
                    conv2: cb(&b.conv2),
                    shortcut: b.shortcut.as_ref().map(cb),
                    stage: b.stage,
                    in_stage: b.in_stage,
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| CumulativeLinear {
                    weight: h.weight.convert(),
                    bias: h.bias.convert(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

fn convert_bn<S: Scalar, T: Scalar>(bn: &BatchNorm<S>) -> BatchNorm<T> {
    let c = |v: &[S]| v.iter().map(|x| T::from_f64(x.as_f64())).collect();
    BatchNorm {
        gamma: c(&bn.gamma),
        beta: c(&bn.beta),
        running_mean: c(&bn.running_mean),
        running_var: c(&bn.running_var),
    }
}

fn conv_bn_params<'a, S: Scalar>(prefix: &str, cb: &'a ConvBn<S>, out: &mut Vec<(String, ParamRef<'a, S>)>) {
    let conv_name = if prefix == "stem" { format!("{prefix}.conv.weight") } else { format!("{prefix}.weight") };
    out.push((
        conv_name,
        ParamRef {
            values: cb.layer.kernel.weights().data(),
            mask: Some(cb.layer.kernel.mask()),
        },
    ));
    out.push((format!("{prefix}.bn.gamma"), ParamRef { values: &cb.bn.gamma, mask: None }));
    out.push((format!("{prefix}.bn.beta"), ParamRef { values: &cb.bn.beta, mask: None }));
}

fn conv_bn_train<S: Scalar>(cb: &ConvBn<S>, input: Tensor<S>, relu: bool) -> Result<ConvBnTrace<S>> {
    let y = conv2d_masked(&input, &cb.layer.kernel)?;
    let [b, c, h, w] = y.dims4();
    let mut data = y.into_data();
    let cache = cb.bn.forward_train(&mut data, b, h * w);
    if relu {
        relu_in_place(&mut data);
    }
    Ok(ConvBnTrace {
        input,
        cache,
        output: Tensor::from_vec(&[b, c, h, w], data)?,
    })
}

/// `[weight, gamma, beta]`
type ConvBnGrads<S> = [Vec<S>; 3];

struct BlockGrads<S> {
    conv1: ConvBnGrads<S>,
    conv2: ConvBnGrads<S>,
    shortcut: Option<ConvBnGrads<S>>,
}

fn conv_bn_backward<S: Scalar>(
    cb: &ConvBn<S>,
    t: &ConvBnTrace<S>,
    mut d_out: Tensor<S>,
    relu: bool,
    need_input_grad: bool,
) -> Result<(Option<Tensor<S>>, ConvBnGrads<S>)> {
    if relu {
        relu_backward_in_place(t.output.data(), d_out.data_mut());
    }
    let [b, _, h, w] = t.output.dims4();
    let (d_pre, dgamma, dbeta) = cb.bn.backward(&t.cache, d_out.data(), b, h * w);
    let d_pre = Tensor::from_vec(t.output.shape(), d_pre)?;
    let (d_in, dw) = conv2d_masked_backward(&t.input, &cb.layer.kernel, &d_pre, need_input_grad)?;
    Ok((d_in, [dw.into_data(), dgamma, dbeta]))
}

fn block_backward<S: Scalar>(block: &ResidualBlock<S>, t: &BlockTrace<S>, mut d_out: Tensor<S>) -> Result<(Tensor<S>, BlockGrads<S>)> {
    relu_backward_in_place(t.output.data(), d_out.data_mut());
    let (d_h1, conv2) = conv_bn_backward(&block.conv2, &t.c2, d_out.clone(), false, true)?;
    let (d_skip, shortcut) = match (&block.shortcut, &t.shortcut) {
        (Some(s), Some(st)) => {
            let (d, g) = conv_bn_backward(s, st, d_out, false, true)?;
            (d.expect("requested"), Some(g))
        }
        _ => (d_out, None),
    };
    let (d_x, conv1) = conv_bn_backward(&block.conv1, &t.c1, d_h1.expect("requested"), true, true)?;
    let mut d_x = d_x.expect("requested");
    for (a, &v) in d_x.data_mut().iter_mut().zip(d_skip.data()) {
        *a = *a + v;
    }
    Ok((d_x, BlockGrads { conv1, conv2, shortcut }))
}

fn assemble_grads<S: Scalar>(stem: ConvBnGrads<S>, blocks: Vec<BlockGrads<S>>, heads: Vec<(Tensor<S>, Tensor<S>)>) -> Gradients<S> {
    let mut tensors: Vec<Vec<S>> = Vec::new();
    tensors.extend(stem);
    for b in blocks {
        tensors.extend(b.conv1);
        tensors.extend(b.conv2);
        if let Some(s) = b.shortcut {
            tensors.extend(s);
        }
    }
    for (w, bias) in heads {
        tensors.push(w.into_data());
        tensors.push(bias.into_data());
    }
    Gradients { tensors }
}
