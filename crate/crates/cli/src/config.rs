//! `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key is optional and defaults to the library default. Unknown or
//! repeated keys and unparsable values are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use dyhead::attention::{AttentionSet, DescriptorMode};
use dyhead::harness::TrainConfig;
use dyhead::tensor::KernelMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Seeds per ablation cell, taken consecutively from `seed`.
    pub ablation_seeds: usize,
    /// Held-out scenes rendered by `dump`.
    pub dump_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            ablation_seeds: 5,
            dump_scenes: 4,
        }
    }
}

pub const KEYS: [&str; 27] = [
    "seed",
    "depth",
    "enable_l",
    "enable_s",
    "enable_c",
    "steps",
    "lr",
    "batch_size",
    "momentum",
    "weight_decay",
    "grad_clip",
    "image_size",
    "levels",
    "channels",
    "num_classes",
    "points",
    "reduction",
    "lambda_a",
    "lambda_b",
    "kernel_mode",
    "descriptor_mode",
    "train_scenes",
    "eval_scenes",
    "eval_seed",
    "eval_interval",
    "ablation_seeds",
    "dump_scenes",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn kernel_mode_name(m: KernelMode) -> &'static str {
    match m {
        KernelMode::Depthwise => "depthwise",
        KernelMode::ChannelMixing => "channel_mixing",
    }
}

fn descriptor_mode_name(m: DescriptorMode) -> &'static str {
    match m {
        DescriptorMode::MeanSc => "mean_sc",
        DescriptorMode::MeanSLinearC => "mean_s_linear_c",
    }
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(key, value)?,
            "depth" => t.depth = num(key, value)?,
            "enable_l" => t.attentions.scale = flag(key, value)?,
            "enable_s" => t.attentions.spatial = flag(key, value)?,
            "enable_c" => t.attentions.task = flag(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "grad_clip" => t.grad_clip = num(key, value)?,
            "image_size" => t.image_size = num(key, value)?,
            "levels" => t.levels = num(key, value)?,
            "channels" => t.channels = num(key, value)?,
            "num_classes" => t.num_classes = num(key, value)?,
            "points" => t.points = num(key, value)?,
            "reduction" => t.reduction = num(key, value)?,
            "lambda_a" => t.lambda_a = num(key, value)?,
            "lambda_b" => t.lambda_b = num(key, value)?,
            "kernel_mode" => {
                t.kernel_mode = match value {
                    "depthwise" => KernelMode::Depthwise,
                    "channel_mixing" => KernelMode::ChannelMixing,
                    _ => return Err(format!("kernel_mode: expected depthwise or channel_mixing, got {value:?}")),
                }
            }
            "descriptor_mode" => {
                t.descriptor_mode = match value {
                    "mean_sc" => DescriptorMode::MeanSc,
                    "mean_s_linear_c" => DescriptorMode::MeanSLinearC,
                    _ => return Err(format!("descriptor_mode: expected mean_sc or mean_s_linear_c, got {value:?}")),
                }
            }
            "train_scenes" => t.train_scenes = num(key, value)?,
            "eval_scenes" => t.eval_scenes = num(key, value)?,
            "eval_seed" => t.eval_seed = num(key, value)?,
            "eval_interval" => t.eval_interval = num(key, value)?,
            "ablation_seeds" => self.ablation_seeds = num(key, value)?,
            "dump_scenes" => self.dump_scenes = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), String> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses a whole file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(format!("line {}: {k:?} set twice", n + 1));
            }
            cfg.set(k, v.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        // Building the detector also checks the image size against the strides.
        dyhead::harness::Detector::new(&self.train).map_err(|e| e.to_string())?;
        if self.ablation_seeds == 0 {
            return Err("ablation_seeds must be positive".into());
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let AttentionSet { scale, spatial, task } = t.attentions;
        let values: [String; 27] = [
            t.seed.to_string(),
            t.depth.to_string(),
            scale.to_string(),
            spatial.to_string(),
            task.to_string(),
            t.steps.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.grad_clip.to_string(),
            t.image_size.to_string(),
            t.levels.to_string(),
            t.channels.to_string(),
            t.num_classes.to_string(),
            t.points.to_string(),
            t.reduction.to_string(),
            t.lambda_a.to_string(),
            t.lambda_b.to_string(),
            kernel_mode_name(t.kernel_mode).to_string(),
            descriptor_mode_name(t.descriptor_mode).to_string(),
            t.train_scenes.to_string(),
            t.eval_scenes.to_string(),
            t.eval_seed.to_string(),
            t.eval_interval.to_string(),
            self.ablation_seeds.to_string(),
            self.dump_scenes.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
