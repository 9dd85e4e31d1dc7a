use super::{check_input, BlockConfig};
use crate::error::Result;
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// How the per-level descriptor fed to the gate is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DescriptorMode {
    /// Mean over positions and channels, then a shared scalar affine map.
    #[default]
    MeanSc,
    /// Mean over positions, then a learned `C -> 1` linear map.
    MeanSLinearC,
}

#[derive(Clone, Debug)]
pub struct ScaleAttnParams {
    pub f_weight: ParamId,
    pub f_bias: ParamId,
    pub mode: DescriptorMode,
}

impl ScaleAttnParams {
    /// Initialised to the identity gate: weight 0, bias 1, so every level
    /// weight is `hard_sigmoid(1) = 1`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        let w_shape: &[usize] = match cfg.descriptor_mode {
            DescriptorMode::MeanSc => &[1],
            DescriptorMode::MeanSLinearC => &[cfg.channels, 1],
        };
        Ok(ScaleAttnParams {
            f_weight: store.add(format!("{prefix}.scale.f_weight"), Tensor::zeros(w_shape))?,
            f_bias: store.add(format!("{prefix}.scale.f_bias"), Tensor::full(&[1], 1.0))?,
            mode: cfg.descriptor_mode,
        })
    }
}

/// Gates each level by `hard_sigmoid(f(descriptor))`.
///
/// Returns the gated `[L, H, W, C]` tensor and the `[L]` level weights.
pub fn scale_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &ScaleAttnParams,
    x: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let l = shape[0];
    let w = params.var(p.f_weight);
    let b = params.var(p.f_bias);
    let logits = match p.mode {
        DescriptorMode::MeanSc => {
            tape.set_stage("scale.pool");
            let d = tape.mean(x, &[1, 2, 3])?;
            tape.set_stage("scale.affine");
            let wd = tape.mul(d, w)?;
            tape.add(wd, b)?
        }
        DescriptorMode::MeanSLinearC => {
            tape.set_stage("scale.pool");
            let d = tape.mean(x, &[1, 2])?;
            tape.set_stage("scale.affine");
            let z = tape.linear(d, w, b)?;
            tape.reshape(z, &[l])?
        }
    };
    let weights = tape.hard_sigmoid(logits);
    let gate = tape.reshape(weights, &[l, 1, 1, 1])?;
    tape.set_stage("scale.apply");
    let out = tape.mul(x, gate)?;
    Ok((out, weights))
}

pub(crate) fn checked_scale_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &ScaleAttnParams,
    cfg: &BlockConfig,
    x: Var,
) -> Result<(Var, Var)> {
    check_input(tape.shape(x), cfg, "scale attention")?;
    scale_attention(tape, params, p, x)
}
