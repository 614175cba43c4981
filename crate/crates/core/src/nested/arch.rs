use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Where classifier heads sit. Position `0` is the stem output, position `k`
/// the output of residual block `k` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSites {
    /// One head after every residual block.
    EveryBlock,
    /// One head after the stem and one after every block.
    StemAndEveryBlock,
    /// Strictly increasing positions; the last must be the final block.
    Explicit(Vec<usize>),
}

/// Structural description of a nested residual network.
///
/// Stage `s > 0` starts with a stride-2 block whose shortcut is a masked
/// 1×1 projection; all other shortcuts are identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub input_channels: usize,
    /// Reference input side length (square inputs), used by the cost model.
    pub input_hw: usize,
    /// Channel width of each stage.
    pub stages: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Channel groups `C`.
    pub groups: usize,
    /// Classes `N`.
    pub classes: usize,
    pub kernel: usize,
    pub head_sites: HeadSites,
    pub seed: u64,
}

impl ArchDescriptor {
    /// ResNet-32 layout with 16 channel groups and a head after the stem and
    /// every block: 16 layer groups × 16 channel groups.
    pub fn resnet32_cifar() -> Self {
        ArchDescriptor {
            input_channels: 3,
            input_hw: 32,
            stages: [16, 32, 64].to_vec(),
            blocks: [5, 5, 5].to_vec(),
            groups: 16,
            classes: 10,
            kernel: 3,
            head_sites: HeadSites::StemAndEveryBlock,
            seed: 0,
        }
    }

    /// Desk-scale model for 8×8 single-channel inputs: two stages of widths
    /// 8 and 16, two blocks each, four channel groups, heads after every
    /// block (4 × 4 grid).
    pub fn toy(classes: usize) -> Self {
        ArchDescriptor {
            input_channels: 1,
            input_hw: 8,
            stages: [8, 16].to_vec(),
            blocks: [2, 2].to_vec(),
            groups: 4,
            classes,
            kernel: 3,
            head_sites: HeadSites::EveryBlock,
            seed: 1,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Resolved head positions (see [`HeadSites`]).
    pub fn site_positions(&self) -> Vec<usize> {
        let n = self.num_blocks();
        match &self.head_sites {
            HeadSites::EveryBlock => (1..=n).collect(),
            HeadSites::StemAndEveryBlock => (0..=n).collect(),
            HeadSites::Explicit(p) => p.clone(),
        }
    }

    /// Layer groups `L`.
    pub fn layer_groups(&self) -> usize {
        self.site_positions().len()
    }

    /// Stage of each block (0-based), in order.
    pub fn block_stages(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| core::iter::repeat(s).take(n))
            .collect()
    }

    /// Stage whose width a head at `position` sees.
    pub fn site_stage(&self, position: usize) -> usize {
        if position == 0 {
            0
        } else {
            self.block_stages()[position - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArch(msg.into()));
        if self.input_channels == 0 || self.input_hw == 0 {
            return bad("input channels and size must be positive");
        }
        if self.stages.is_empty() || self.stages.len() != self.blocks.len() {
            return bad("stages and blocks must be non-empty lists of equal length");
        }
        if self.stages.contains(&0) {
            return bad("stage widths must be positive");
        }
        if self.blocks[0] == 0 && self.stages.len() > 1 {
            return bad("every stage needs at least one block");
        }
        if self.blocks.iter().skip(1).any(|&b| b == 0) {
            return bad("every stage after the first needs at least one block");
        }
        if self.groups == 0 || self.classes < 2 {
            return bad("need at least one channel group and two classes");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        let sites = self.site_positions();
        let n = self.num_blocks();
        if sites.is_empty() || sites.windows(2).any(|w| w[0] >= w[1]) {
            return bad("head sites must be a non-empty strictly increasing list");
        }
        if *sites.last().expect("non-empty") != n {
            return Err(Error::InvalidArch(format!(
                "the last head site must be the final block ({n}), got {sites:?}"
            )));
        }
        // each stride-2 stage halves the side; keep at least one pixel
        let mut side = self.input_hw;
        for _ in 1..self.stages.len() {
            side = (side - 1) / 2 + 1;
        }
        if side == 0 {
            return bad("input too small for the number of stages");
        }
        Ok(())
    }
}
