//! Analytic multiply-accumulate counts for the attention stack and the head.
//!
//! One MAC is one multiply (with or without an accumulate); FLOPs are
//! reported as `2 * MACs`. Additions on their own, comparisons, clamps and
//! nonlinearities are free. Stage names match the ones the tape records, so
//! every count here can be checked against an instrumented forward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use crate::attention::{stack_forward, BlockConfig, DescriptorMode, DyHeadStack};
use crate::error::{Error, Result};
use crate::head::{predict, HeadParams};
use crate::tensor::{KernelMode, ParamStore, Tape, Tensor};

pub const CONVENTION: &str =
    "MACs count multiplies; FLOPs = 2 x MACs; additions, comparisons and nonlinearities excluded";

/// Shape of the aligned tensor plus the block hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub block: BlockConfig,
    pub height: usize,
    pub width: usize,
    /// Include the prediction head with this many classes.
    pub head_classes: Option<usize>,
}

impl CostConfig {
    pub fn new(block: BlockConfig, height: usize, width: usize) -> Self {
        CostConfig {
            block,
            height,
            width,
            head_classes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("cost model needs a non-empty grid"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub per_stage: BTreeMap<String, u64>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub config: CostConfig,
    pub depth: usize,
}

impl FlopReport {
    fn from_stages(per_stage: BTreeMap<String, u64>, config: CostConfig, depth: usize) -> Self {
        let total_macs = per_stage.values().sum();
        FlopReport {
            per_stage,
            total_macs,
            total_flops: 2 * total_macs,
            config,
            depth,
        }
    }

    /// `stage,macs,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,macs,flops\n");
        for (stage, &m) in &self.per_stage {
            let _ = writeln!(out, "{stage},{m},{}", 2 * m);
        }
        let _ = writeln!(out, "total,{},{}", self.total_macs, self.total_flops);
        out
    }

    pub fn summary(&self) -> String {
        let b = &self.config.block;
        let mut out = format!(
            "# {CONVENTION}\n# L={} H={} W={} C={} K={} depth={} kernels={:?} descriptor={:?} attentions={}\n",
            b.levels,
            self.config.height,
            self.config.width,
            b.channels,
            b.points,
            self.depth,
            b.kernel_mode,
            b.descriptor_mode,
            b.attentions.label()
        );
        for (stage, &m) in &self.per_stage {
            let _ = writeln!(out, "{stage:<20} {m:>14} MACs");
        }
        let _ = writeln!(
            out,
            "{:<20} {:>14} MACs ({} FLOPs)",
            "total", self.total_macs, self.total_flops
        );
        out
    }
}

/// Number of (output, tap) pairs along one axis of a stride-1, pad-1 3-tap
/// filter whose taps land inside a length-`n` axis.
fn conv_pairs(n: usize) -> u64 {
    match n {
        0 => 0,
        1 => 1,
        n => 3 * n as u64 - 2,
    }
}

fn add(stages: &mut BTreeMap<String, u64>, name: &str, macs: u64) {
    if macs > 0 {
        *stages.entry(name.to_string()).or_default() += macs;
    }
}

fn block_stages(cfg: &CostConfig) -> BTreeMap<String, u64> {
    let b = &cfg.block;
    let (l, c, k) = (b.levels as u64, b.channels as u64, b.points as u64);
    let s = (cfg.height * cfg.width) as u64;
    let lsc = l * s * c;
    let mut st = BTreeMap::new();
    if b.attentions.scale {
        add(&mut st, "scale.pool", lsc);
        let affine = match b.descriptor_mode {
            DescriptorMode::MeanSc => l,
            DescriptorMode::MeanSLinearC => l * c,
        };
        add(&mut st, "scale.affine", affine);
        add(&mut st, "scale.apply", lsc);
    }
    if b.attentions.spatial {
        let pairs = conv_pairs(cfg.height) * conv_pairs(cfg.width);
        add(&mut st, "spatial.predictor", pairs * c * 3 * k);
        add(&mut st, "spatial.sample", l * k * s * 4 * c);
        let per_tap = match b.kernel_mode {
            KernelMode::Depthwise => 1 + c,
            KernelMode::ChannelMixing => c + c * c,
        };
        add(&mut st, "spatial.aggregate", l * k * s * per_tap + s * c);
    }
    if b.attentions.task {
        let hidden = c / b.reduction as u64;
        add(&mut st, "task.pool", lsc);
        add(&mut st, "task.fc1", c * hidden);
        add(&mut st, "task.fc2", hidden * 4 * c);
        add(&mut st, "task.norm", 3 * 4 * c);
        add(&mut st, "task.coef", 8 * c);
        add(&mut st, "task.apply", 2 * lsc);
    }
    st
}

fn head_stages(cfg: &CostConfig) -> BTreeMap<String, u64> {
    let mut st = BTreeMap::new();
    if let Some(classes) = cfg.head_classes {
        let b = &cfg.block;
        let lsc = (b.levels * cfg.height * cfg.width * b.channels) as u64;
        add(&mut st, "head.predict", lsc * (classes as u64 + 5));
    }
    st
}

/// Cost of a single block (the head is never included).
pub fn count_block(cfg: &CostConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.head_classes = None;
    Ok(FlopReport::from_stages(block_stages(&c), c, 1))
}

/// Cost of `depth` stacked blocks plus the head, if configured.
pub fn count_stack(cfg: &CostConfig, depth: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let mut stages = head_stages(cfg);
    for (name, m) in block_stages(cfg) {
        add(&mut stages, &name, m * depth as u64);
    }
    Ok(FlopReport::from_stages(stages, cfg.clone(), depth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostCurve {
    pub reports: Vec<FlopReport>,
    /// MACs added by each block.
    pub per_block_macs: u64,
}

impl CostCurve {
    /// `depth,macs,flops,delta_flops` and, with `stages`, one MAC column per
    /// stage.
    pub fn to_csv(&self, stages: bool) -> String {
        let names: Vec<String> = self
            .reports
            .iter()
            .flat_map(|r| r.per_stage.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = String::from("depth,macs,flops,delta_flops");
        if stages {
            for n in &names {
                let _ = write!(out, ",{n}");
            }
        }
        out.push('\n');
        let mut prev: Option<u64> = None;
        for r in &self.reports {
            let delta = prev.map_or(String::new(), |p| (r.total_flops as i128 - p as i128).to_string());
            let _ = write!(out, "{},{},{},{delta}", r.depth, r.total_macs, r.total_flops);
            if stages {
                for n in &names {
                    let _ = write!(out, ",{}", r.per_stage.get(n).copied().unwrap_or(0));
                }
            }
            out.push('\n');
            prev = Some(r.total_flops);
        }
        out
    }
}

/// Totals for each depth, checking that every step adds exactly
/// `per_block_macs * (depth difference)`.
pub fn stack_cost_curve(cfg: &CostConfig, depths: &[usize]) -> Result<CostCurve> {
    if depths.is_empty() {
        return Err(Error::invalid("cost curve needs at least one depth"));
    }
    let per_block = count_block(cfg)?.total_macs;
    let reports = depths
        .iter()
        .map(|&d| count_stack(cfg, d))
        .collect::<Result<Vec<_>>>()?;
    for pair in reports.windows(2) {
        let step = pair[1].depth as i128 - pair[0].depth as i128;
        let delta = pair[1].total_macs as i128 - pair[0].total_macs as i128;
        if delta != step * per_block as i128 {
            return Err(Error::invalid(format!(
                "cost not affine in depth: {} -> {} added {delta} MACs, expected {}",
                pair[0].depth,
                pair[1].depth,
                step * per_block as i128
            )));
        }
    }
    Ok(CostCurve {
        reports,
        per_block_macs: per_block,
    })
}

/// Runs a real forward pass on random data and returns the MACs the tape
/// recorded per stage.
pub fn instrumented_count(cfg: &CostConfig, depth: usize, seed: u64) -> Result<FlopReport> {
    cfg.validate()?;
    let b = &cfg.block;
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stack = DyHeadStack::new(&mut store, "stack", b, depth, &mut rng)?;
    let head = cfg
        .head_classes
        .map(|k| HeadParams::new(&mut store, "head", b.levels, b.channels, k, &mut rng))
        .transpose()?;
    let x = Tensor::from_fn(&[b.levels, cfg.height, cfg.width, b.channels], |_| {
        rng.random_range(-1.0..1.0)
    });
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vx = tape.constant(x);
    let (out, _) = stack_forward(&mut tape, &bind, &stack, vx)?;
    if let Some(h) = &head {
        predict(&mut tape, &bind, h, out)?;
    }
    Ok(FlopReport::from_stages(tape.macs().clone(), cfg.clone(), depth))
}
