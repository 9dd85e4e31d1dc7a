use rand::Rng;

use super::{check_input, BlockConfig};
use crate::error::{Error, Result};
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// Standardisation epsilon of the hyper-function's normalisation layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct TaskAttnParams {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub reduction: usize,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl TaskAttnParams {
    /// `fc1` is uniform in `+-1/sqrt(C)`; `fc2` starts at zero so the
    /// attention starts as a plain ReLU.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        if cfg.reduction == 0 || c % cfg.reduction != 0 {
            return Err(Error::invalid(format!(
                "reduction {} does not divide channel count {c}",
                cfg.reduction
            )));
        }
        let hidden = c / cfg.reduction;
        let bound = 1.0 / (c as f64).sqrt();
        Ok(TaskAttnParams {
            fc1_weight: store.add(
                format!("{prefix}.task.fc1_weight"),
                Tensor::from_fn(&[c, hidden], |_| rng.random_range(-bound..bound)),
            )?,
            fc1_bias: store.add(format!("{prefix}.task.fc1_bias"), Tensor::zeros(&[hidden]))?,
            fc2_weight: store.add(
                format!("{prefix}.task.fc2_weight"),
                Tensor::zeros(&[hidden, 4 * c]),
            )?,
            fc2_bias: store.add(format!("{prefix}.task.fc2_bias"), Tensor::zeros(&[4 * c]))?,
            reduction: cfg.reduction,
            lambda_a: cfg.lambda_a,
            lambda_b: cfg.lambda_b,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    pub output: Var,
    /// Hyper-function output `u` in `[-1, 1]`, `[4, C]`.
    pub u: Var,
    /// `(alpha1, alpha2, beta1, beta2)` per channel, `[4, C]`.
    pub coefficients: Var,
}

/// `max(alpha1 * x + beta1, alpha2 * x + beta2)` per channel, with
/// `coefficients` laid out as `[4, C]` rows `(alpha1, alpha2, beta1, beta2)`.
pub fn apply_dynamic_relu(tape: &mut Tape, x: Var, coefficients: Var) -> Result<Var> {
    let a1 = tape.select0(coefficients, 0)?;
    let a2 = tape.select0(coefficients, 1)?;
    let b1 = tape.select0(coefficients, 2)?;
    let b2 = tape.select0(coefficients, 3)?;
    let s1 = tape.mul(x, a1)?;
    let y1 = tape.add(s1, b1)?;
    let s2 = tape.mul(x, a2)?;
    let y2 = tape.add(s2, b2)?;
    tape.max(y1, y2)
}

/// Channel-wise dynamic activation whose slopes and intercepts come from a
/// pooled hyper-function: mean over levels and positions, two linear layers,
/// standardisation, and `2 * sigmoid - 1`.
pub fn task_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &TaskAttnParams,
    x: Var,
) -> Result<TaskOutput> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| Error::invalid("task attention on a scalar"))?;
    let pooled_axes: Vec<usize> = (0..shape.len() - 1).collect();
    tape.set_stage("task.pool");
    let g = tape.mean(x, &pooled_axes)?;
    tape.set_stage("task.fc1");
    let h = tape.linear(g, params.var(p.fc1_weight), params.var(p.fc1_bias))?;
    let h = tape.relu(h);
    tape.set_stage("task.fc2");
    let raw = tape.linear(h, params.var(p.fc2_weight), params.var(p.fc2_bias))?;
    tape.set_stage("task.norm");
    let z = tape.standardize(raw, NORM_EPS);
    tape.set_stage("task.coef");
    let s = tape.sigmoid(z);
    let u = tape.affine(s, 2.0, -1.0);
    let u = tape.reshape(u, &[4, c])?;
    let scale = tape.constant(Tensor::new(
        &[4, 1],
        vec![p.lambda_a, p.lambda_a, p.lambda_b, p.lambda_b],
    )?);
    let init = tape.constant(Tensor::new(&[4, 1], vec![1.0, 0.0, 0.0, 0.0])?);
    let scaled = tape.mul(u, scale)?;
    let coefficients = tape.add(scaled, init)?;
    tape.set_stage("task.apply");
    let output = apply_dynamic_relu(tape, x, coefficients)?;
    Ok(TaskOutput {
        output,
        u,
        coefficients,
    })
}

pub(crate) fn checked_task_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &TaskAttnParams,
    cfg: &BlockConfig,
    x: Var,
) -> Result<TaskOutput> {
    check_input(tape.shape(x), cfg, "task attention")?;
    task_attention(tape, params, p, x)
}
