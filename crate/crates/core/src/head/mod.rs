//! One-stage prediction head on top of the attention stack: per-position
//! classification, centerness and box-distance maps, plus target assignment,
//! the training loss, decoding and toy average precision.

mod eval;
mod targets;

pub use eval::{
    average_precision, decode, decode_and_eval, iou, nms, DecodeConfig, Detection,
};
pub use targets::{assign_targets, default_level_ranges, GridSpec, GroundTruth, Targets};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// Foreground probability the classification bias starts at.
pub const PRIOR_PROB: f64 = 0.01;
/// Upper clamp of the exponentiated box distances.
pub const BOX_EXP_MAX: f64 = 1e4;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// The three 1x1 predictors of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelPredictors {
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
    pub ctr_weight: ParamId,
    pub ctr_bias: ParamId,
    pub box_weight: ParamId,
    pub box_bias: ParamId,
}

/// One set of predictors per level. Parameters are `{prefix}.l{i}.*`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub levels: Vec<LevelPredictors>,
    pub num_classes: usize,
}

impl HeadParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        levels: usize,
        channels: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if levels == 0 || channels == 0 || num_classes == 0 {
            return Err(Error::invalid("head needs positive level, channel and class counts"));
        }
        let prior_logit = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let mut out = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut small = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-0.01..0.01));
            let name = |s: &str| format!("{prefix}.l{l}.{s}");
            out.push(LevelPredictors {
                cls_weight: store.add(name("cls_weight"), small(&[channels, num_classes]))?,
                cls_bias: store.add(name("cls_bias"), Tensor::full(&[num_classes], prior_logit))?,
                ctr_weight: store.add(name("ctr_weight"), small(&[channels, 1]))?,
                ctr_bias: store.add(name("ctr_bias"), Tensor::zeros(&[1]))?,
                box_weight: store.add(name("box_weight"), small(&[channels, 4]))?,
                box_bias: store.add(name("box_bias"), Tensor::zeros(&[4]))?,
            });
        }
        Ok(HeadParams {
            levels: out,
            num_classes,
        })
    }
}

/// Head outputs on the tape, all `[L, H, W, *]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub cls_logits: Var,
    /// Centerness logits.
    pub centerness: Var,
    /// Left/top/right/bottom distances in grid units, already exponentiated.
    pub box_deltas: Var,
}

/// Plain values of a [`HeadOutputs`], detached from the tape.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub cls_logits: Tensor,
    pub centerness: Tensor,
    pub box_deltas: Tensor,
}

impl HeadOutputs {
    pub fn values(&self, tape: &Tape) -> HeadMaps {
        HeadMaps {
            cls_logits: tape.value(self.cls_logits).clone(),
            centerness: tape.value(self.centerness).clone(),
            box_deltas: tape.value(self.box_deltas).clone(),
        }
    }
}

pub fn predict(tape: &mut Tape, params: &Binding, p: &HeadParams, x: Var) -> Result<HeadOutputs> {
    if tape.shape(x).len() != 4 {
        return Err(Error::invalid(format!(
            "head expects [L, H, W, C] features, got {:?}",
            tape.shape(x)
        )));
    }
    if tape.shape(x)[0] != p.levels.len() {
        return Err(Error::invalid(format!(
            "head has {} levels, features have {}",
            p.levels.len(),
            tape.shape(x)[0]
        )));
    }
    tape.set_stage("head.predict");
    let (mut cls, mut ctr, mut raw) = (Vec::new(), Vec::new(), Vec::new());
    for (l, q) in p.levels.iter().enumerate() {
        let xl = tape.select0(x, l)?;
        cls.push(tape.linear(xl, params.var(q.cls_weight), params.var(q.cls_bias))?);
        ctr.push(tape.linear(xl, params.var(q.ctr_weight), params.var(q.ctr_bias))?);
        raw.push(tape.linear(xl, params.var(q.box_weight), params.var(q.box_bias))?);
    }
    let cls_logits = tape.stack(&cls)?;
    let centerness = tape.stack(&ctr)?;
    let raw = tape.stack(&raw)?;
    let box_deltas = tape.exp_clamped(raw, BOX_EXP_MAX);
    Ok(HeadOutputs {
        cls_logits,
        centerness,
        box_deltas,
    })
}

/// Loss terms, each already divided by `max(positives, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
}

/// Focal classification loss over every position plus L1 box and
/// centerness cross-entropy on positives, normalised by the positive count.
pub fn loss(tape: &mut Tape, out: &HeadOutputs, t: &Targets) -> Result<LossParts> {
    let n = t.positions();
    if tape.value(out.cls_logits).len() != n * t.num_classes
        || tape.value(out.box_deltas).len() != n * 4
    {
        return Err(Error::Shape {
            lhs: tape.shape(out.cls_logits).to_vec(),
            rhs: vec![t.grid.levels, t.grid.height, t.grid.width, t.num_classes],
            context: "head outputs vs targets",
        });
    }
    tape.set_stage("head.loss");
    let norm = 1.0 / t.num_positive.max(1) as f64;
    let focal = tape.sigmoid_focal_loss(out.cls_logits, t.class_onehot(), FOCAL_ALPHA, FOCAL_GAMMA)?;
    let box_mask: Vec<f64> = t.positive.iter().flat_map(|&m| [m; 4]).collect();
    let l1 = tape.l1_loss(out.box_deltas, t.box_targets.clone(), box_mask)?;
    let bce = tape.bce_kl_loss(out.centerness, t.centerness.clone(), t.positive.clone())?;
    let cls = tape.affine(focal, norm, 0.0);
    let reg = tape.affine(l1, norm, 0.0);
    let ctr = tape.affine(bce, norm, 0.0);
    let partial = tape.add(cls, reg)?;
    let total = tape.add(partial, ctr)?;
    Ok(LossParts { total, cls, reg, ctr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_pcg::Pcg32;

    #[test]
    fn zero_features_give_bias_logits() {
        let mut store = ParamStore::new();
        let mut rng = Pcg32::seed_from_u64(0);
        let p = HeadParams::new(&mut store, "head", 2, 4, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 3, 3, 4]));
        let out = predict(&mut tape, &bind, &p, x).unwrap();
        let bias = -(99.0f64).ln();
        assert_eq!(tape.shape(out.cls_logits), &[2, 3, 3, 3]);
        assert!(tape.value(out.cls_logits).data().iter().all(|&v| v == bias));
        assert!(tape.value(out.box_deltas).data().iter().all(|&v| v == 1.0));
        let p0 = 1.0 / (1.0 + (-bias).exp());
        assert!((p0 - PRIOR_PROB).abs() < 1e-12);
    }
}
