//! Scale-, spatial- and task-aware attentions, their composition into a
//! block, and block stacking.
//!
//! All functions take the aligned feature tensor as `[L, H, W, C]`; the
//! `[L, S, C]` view is the same buffer.

mod block;
mod scale;
mod spatial;
mod stats;
mod task;

pub use block::{stack_forward, BlockTrace, DyHeadBlockParams, DyHeadStack};
pub use scale::{scale_attention, DescriptorMode, ScaleAttnParams};
pub use spatial::{spatial_attention, SpatialAttnParams, SpatialOutput};
pub use stats::{scale_ratio_stats, ScaleRatioHistogram, RATIO_BIN_EDGES};
pub use task::{apply_dynamic_relu, task_attention, TaskAttnParams, TaskOutput};

use crate::error::{Error, Result};
use crate::tensor::KernelMode;

/// Which of the three attentions a block applies. Disabled ones are identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSet {
    pub scale: bool,
    pub spatial: bool,
    pub task: bool,
}

impl AttentionSet {
    pub const ALL: AttentionSet = AttentionSet {
        scale: true,
        spatial: true,
        task: true,
    };
    pub const NONE: AttentionSet = AttentionSet {
        scale: false,
        spatial: false,
        task: false,
    };

    /// The eight on/off combinations in ablation-table order: none, each
    /// single attention, each pair, all three.
    pub fn ablation_grid() -> [AttentionSet; 8] {
        let s = |scale, spatial, task| AttentionSet { scale, spatial, task };
        [
            s(false, false, false),
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(false, true, true),
            s(true, false, true),
            s(true, true, false),
            s(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mark = |on: bool| if on { "Y" } else { "N" };
        format!("{}{}{}", mark(self.scale), mark(self.spatial), mark(self.task))
    }
}

/// Shape and hyper-parameters shared by every block of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub levels: usize,
    pub channels: usize,
    /// Sampling points per position; an odd square (9 = 3x3 grid).
    pub points: usize,
    pub reduction: usize,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub descriptor_mode: DescriptorMode,
    pub kernel_mode: KernelMode,
    pub attentions: AttentionSet,
}

impl BlockConfig {
    pub fn new(levels: usize, channels: usize) -> Self {
        BlockConfig {
            levels,
            channels,
            points: 9,
            reduction: 4,
            lambda_a: 1.0,
            lambda_b: 0.5,
            descriptor_mode: DescriptorMode::MeanSc,
            kernel_mode: KernelMode::Depthwise,
            attentions: AttentionSet::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 {
            return Err(Error::invalid("levels and channels must be positive"));
        }
        crate::tensor::base_offsets(self.points)?;
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::invalid(format!(
                "reduction {} does not divide channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }
}

/// Median level of the aligned tensor.
pub(crate) fn median_of(levels: usize) -> usize {
    (levels - 1) / 2
}

/// Validates an `[L, H, W, C]` input against a config.
pub(crate) fn check_input(shape: &[usize], cfg: &BlockConfig, what: &str) -> Result<()> {
    if shape.len() != 4 || shape[0] != cfg.levels || shape[3] != cfg.channels {
        return Err(Error::invalid(format!(
            "{what}: expected aligned input [{}, H, W, {}], got {shape:?}",
            cfg.levels, cfg.channels
        )));
    }
    Ok(())
}
