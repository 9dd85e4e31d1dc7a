use std::fmt::Write as _;
use std::path::Path;

use super::model::Detector;
use super::scene::{gen_scene, SyntheticScene};
use crate::attention::{AttentionSet, BlockConfig, DescriptorMode};
use crate::error::{Error, Result};
use crate::head::{
    assign_targets, decode, average_precision, default_level_ranges, loss, DecodeConfig,
    GroundTruth, Targets,
};
use crate::tensor::{KernelMode, Tape};

/// Seed of the held-out scenes; shared by every run so that results are
/// comparable across configurations.
pub const DEFAULT_EVAL_SEED: u64 = 0x00E7_A1_5EED;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Seeds parameter initialisation and the training scenes.
    pub seed: u64,
    pub depth: usize,
    pub attentions: AttentionSet,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the summed gradient when its L2 norm exceeds this; 0 disables.
    pub grad_clip: f64,
    pub image_size: usize,
    pub levels: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub points: usize,
    pub reduction: usize,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub kernel_mode: KernelMode,
    pub descriptor_mode: DescriptorMode,
    /// Size of the training pool, cycled in order; 0 draws a fresh scene for
    /// every sample.
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    /// Steps between metric rows; 0 logs only the final step.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            depth: 2,
            attentions: AttentionSet::ALL,
            steps: 1500,
            lr: 0.01,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            image_size: 64,
            levels: 3,
            channels: 16,
            num_classes: 3,
            points: 9,
            reduction: 4,
            lambda_a: 1.0,
            lambda_b: 0.5,
            kernel_mode: KernelMode::Depthwise,
            descriptor_mode: DescriptorMode::MeanSc,
            train_scenes: 0,
            eval_scenes: 32,
            eval_seed: DEFAULT_EVAL_SEED,
            eval_interval: 250,
        }
    }
}

impl TrainConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            levels: self.levels,
            channels: self.channels,
            points: self.points,
            reduction: self.reduction,
            lambda_a: self.lambda_a,
            lambda_b: self.lambda_b,
            descriptor_mode: self.descriptor_mode,
            kernel_mode: self.kernel_mode,
            attentions: self.attentions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be finite and non-negative");
        }
        let coarsest = 2usize << self.levels;
        if self.image_size == 0 || self.image_size % coarsest != 0 {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of {coarsest} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`: divided by ten at 67% and again at 89% of
    /// the run.
    pub fn lr_at(&self, step: usize) -> f64 {
        let first = self.steps * 67 / 100;
        let second = self.steps * 89 / 100;
        let mut lr = self.lr;
        if step >= first {
            lr *= 0.1;
        }
        if step >= second {
            lr *= 0.1;
        }
        lr
    }

    fn train_scene_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed ^ 0x7EA1_0000, index as u64)
    }

    pub fn eval_set(&self) -> Vec<SyntheticScene> {
        (0..self.eval_scenes)
            .map(|i| gen_scene(derive_seed(self.eval_seed, i as u64), self.image_size, self.num_classes))
            .collect()
    }
}

/// A well-mixed seed for item `index` of stream `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair.
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Mean loss over the held-out scenes.
    pub loss: f64,
    pub toy_ap: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,toy_ap\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9},{:.6}", r.step, r.loss, r.toy_ap);
    }
    out
}

pub struct TrainResult {
    pub detector: Detector,
    pub metrics: Vec<MetricRow>,
    /// Mean training-batch loss of every step.
    pub train_loss: Vec<f64>,
}

impl TrainResult {
    pub fn final_ap(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.toy_ap)
    }
}

fn targets_for(det: &Detector, gt: &GroundTruth) -> Result<Targets> {
    assign_targets(gt, &det.grid, &default_level_ranges(det.grid.levels), det.num_classes)
}

/// Mean held-out loss and toy AP.
pub fn evaluate(det: &Detector, scenes: &[SyntheticScene]) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Ok((0.0, 1.0));
    }
    let cfg = DecodeConfig::default();
    let mut total = 0.0;
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut tape = Tape::new();
        let f = det.forward(&mut tape, &s.image)?;
        let t = targets_for(det, &s.gt)?;
        let l = loss(&mut tape, &f.outputs, &t)?;
        total += tape.value(l.total).item()?;
        dets.push(decode(&f.outputs.values(&tape), &det.grid, &cfg));
        gts.push(s.gt.clone());
    }
    let ap = average_precision(&dets, &gts, det.num_classes, cfg.match_iou);
    Ok((total / scenes.len() as f64, ap))
}

fn write_divergence_dump(dir: &Path, det: &Detector, step: usize, loss: f64) -> Result<()> {
    let mut out = format!("step {step}\nloss {loss}\n\nparameter,l2_norm,max_abs,finite\n");
    for p in det.store.iter() {
        let d = p.value.data();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let _ = writeln!(out, "{},{norm},{max},{}", p.name, p.value.is_finite());
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("divergence.txt"), out)?;
    Ok(())
}

/// Writes the divergence dump if asked and returns the error to report.
fn diverged(dump_dir: Option<&Path>, det: &Detector, step: usize, loss: f64) -> Result<Error> {
    if let Some(dir) = dump_dir {
        write_divergence_dump(dir, det, step, loss)?;
    }
    Ok(Error::Divergence { step, loss })
}

/// SGD with momentum and L2 weight decay, step
/// learning-rate decay and optional gradient-norm clipping. Metrics are
/// logged at step 0, every `eval_interval` steps and after the last step;
/// a zero-step run logs nothing.
///
/// A non-finite training loss aborts with [`Error::Divergence`]; if
/// `dump_dir` is given, parameter statistics are written there first.
pub fn train(cfg: &TrainConfig, dump_dir: Option<&Path>) -> Result<TrainResult> {
    let mut det = Detector::new(cfg)?;
    let eval = cfg.eval_set();
    let pool: Vec<SyntheticScene> = (0..cfg.train_scenes)
        .map(|i| gen_scene(cfg.train_scene_seed(i), cfg.image_size, cfg.num_classes))
        .collect();
    let pool_targets = pool
        .iter()
        .map(|s| targets_for(&det, &s.gt))
        .collect::<Result<Vec<_>>>()?;

    let mut velocity: Vec<Vec<f64>> = det.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut metrics = Vec::new();
    let mut train_loss = Vec::with_capacity(cfg.steps);
    let mut sample = 0usize;

    let log_due = |step: usize| {
        cfg.steps > 0 && (step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0))
    };

    for step in 0..=cfg.steps {
        if log_due(step) {
            let (l, ap) = match evaluate(&det, &eval) {
                Err(e) if e.is_numerical() => return Err(diverged(dump_dir, &det, step, f64::NAN)?),
                r => r?,
            };
            log::info!("step {step}: eval loss {l:.5}, toy AP {ap:.4}");
            metrics.push(MetricRow { step, loss: l, toy_ap: ap });
        }
        if step == cfg.steps {
            break;
        }

        det.store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let fresh;
            let (scene, targets) = if pool.is_empty() {
                let s = gen_scene(cfg.train_scene_seed(sample), cfg.image_size, cfg.num_classes);
                let t = targets_for(&det, &s.gt)?;
                fresh = (s, t);
                (&fresh.0, &fresh.1)
            } else {
                let i = sample % pool.len();
                (&pool[i], &pool_targets[i])
            };
            sample += 1;
            let mut tape = Tape::new();
            let step_out = det
                .forward(&mut tape, &scene.image)
                .and_then(|f| loss(&mut tape, &f.outputs, targets).map(|l| (f, l)));
            // Blown-up weights surface either as a non-finite loss or as a
            // non-finite intermediate rejected inside the forward pass.
            let (f, l, value) = match step_out {
                Ok((f, l)) => {
                    let v = tape.value(l.total).item()?;
                    (f, l, v)
                }
                Err(e) if e.is_numerical() => return Err(diverged(dump_dir, &det, step, f64::NAN)?),
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(diverged(dump_dir, &det, step, value)?);
            }
            batch_loss += value;
            let grads = tape.backward(l.total)?;
            det.store.accumulate(&f.binding, &grads);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        train_loss.push(batch_loss * inv);

        let mut norm2 = 0.0;
        for p in det.store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= inv;
                norm2 += *g * *g;
            }
        }
        let clip = if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
            cfg.grad_clip / norm2.sqrt()
        } else {
            1.0
        };
        let lr = cfg.lr_at(step);
        for (p, v) in det.store.iter_mut().zip(&mut velocity) {
            let (values, grads) = (p.value.data_mut(), p.grad.data());
            for ((w, &g), m) in values.iter_mut().zip(grads).zip(v.iter_mut()) {
                let g = g * clip + cfg.weight_decay * *w;
                *m = cfg.momentum * *m + g;
                *w -= lr * *m;
            }
        }
    }
    Ok(TrainResult {
        detector: det,
        metrics,
        train_loss,
    })
}
