use rand::Rng;

use super::scale::checked_scale_attention;
use super::spatial::checked_spatial_attention;
use super::task::checked_task_attention;
use super::{BlockConfig, ScaleAttnParams, SpatialAttnParams, TaskAttnParams};
use crate::error::Result;
use crate::tensor::{Binding, ParamStore, Tape, Var};

/// Parameters of one block. Attentions switched off in the config have no
/// parameters and act as the identity.
#[derive(Clone, Debug)]
pub struct DyHeadBlockParams {
    pub scale: Option<ScaleAttnParams>,
    pub spatial: Option<SpatialAttnParams>,
    pub task: Option<TaskAttnParams>,
    pub config: BlockConfig,
}

/// Values recorded while running one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// `[L]` level weights.
    pub scale_weights: Option<Var>,
    /// `[H, W, K]` modulation.
    pub modulation: Option<Var>,
    /// `[4, C]` hyper-function output.
    pub task_u: Option<Var>,
}

impl DyHeadBlockParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let on = cfg.attentions;
        Ok(DyHeadBlockParams {
            scale: on
                .scale
                .then(|| ScaleAttnParams::new(store, prefix, cfg))
                .transpose()?,
            spatial: on
                .spatial
                .then(|| SpatialAttnParams::new(store, prefix, cfg, rng))
                .transpose()?,
            task: on
                .task
                .then(|| TaskAttnParams::new(store, prefix, cfg, rng))
                .transpose()?,
            config: cfg.clone(),
        })
    }

    /// Task attention applied to spatial attention applied to scale attention.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<BlockTrace> {
        let cfg = &self.config;
        let mut cur = x;
        let mut trace = BlockTrace {
            output: x,
            scale_weights: None,
            modulation: None,
            task_u: None,
        };
        if let Some(p) = &self.scale {
            let (out, w) = checked_scale_attention(tape, params, p, cfg, cur)?;
            cur = out;
            trace.scale_weights = Some(w);
        }
        if let Some(p) = &self.spatial {
            let s = checked_spatial_attention(tape, params, p, cfg, cur)?;
            cur = s.output;
            trace.modulation = Some(s.modulation);
        }
        if let Some(p) = &self.task {
            let t = checked_task_attention(tape, params, p, cfg, cur)?;
            cur = t.output;
            trace.task_u = Some(t.u);
        }
        trace.output = cur;
        Ok(trace)
    }
}

/// An ordered sequence of blocks sharing `(L, C)`. Depth 0 is a passthrough.
#[derive(Clone, Debug)]
pub struct DyHeadStack {
    pub blocks: Vec<DyHeadBlockParams>,
    pub config: BlockConfig,
}

impl DyHeadStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BlockConfig,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..depth)
            .map(|i| DyHeadBlockParams::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(DyHeadStack {
            blocks,
            config: cfg.clone(),
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Runs every block in order; returns the final output and one trace per
/// block.
pub fn stack_forward(
    tape: &mut Tape,
    params: &Binding,
    stack: &DyHeadStack,
    x: Var,
) -> Result<(Var, Vec<BlockTrace>)> {
    let mut cur = x;
    let mut traces = Vec::with_capacity(stack.depth());
    for block in &stack.blocks {
        let t = block.forward(tape, params, cur)?;
        cur = t.output;
        traces.push(t);
    }
    Ok((cur, traces))
}
