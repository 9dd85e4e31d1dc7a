use rand::Rng;

use super::{check_input, median_of, BlockConfig};
use crate::error::{Error, Result};
use crate::tensor::{Binding, KernelMode, ParamId, ParamStore, Tape, Tensor, Var};

/// Added to the centre-tap kernel at init: the inverse of the initial
/// modulation `sigmoid(0)`.
pub const CENTRE_GAIN: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct SpatialAttnParams {
    /// Sampling points per position.
    pub points: usize,
    /// `[3, 3, C, 3K]` conv on the median level: `2K` offsets then `K`
    /// modulation logits.
    pub predictor_kernel: ParamId,
    pub predictor_bias: ParamId,
    /// `[L, K]` (depthwise) or `[L, K, C, C]` (channel mixing).
    pub kernels: ParamId,
    pub mode: KernelMode,
}

impl SpatialAttnParams {
    /// Offset predictor starts at zero (no offsets, modulation 0.5); the
    /// per-level kernels are uniform in `+-1/sqrt(9C)` plus [`CENTRE_GAIN`]
    /// on the identity of the centre tap.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (l, c, k) = (cfg.levels, cfg.channels, cfg.points);
        let predictor_kernel = store.add(
            format!("{prefix}.spatial.predictor_kernel"),
            Tensor::zeros(&[3, 3, c, 3 * k]),
        )?;
        let predictor_bias = store.add(
            format!("{prefix}.spatial.predictor_bias"),
            Tensor::zeros(&[3 * k]),
        )?;
        let shape: Vec<usize> = match cfg.kernel_mode {
            KernelMode::Depthwise => vec![l, k],
            KernelMode::ChannelMixing => vec![l, k, c, c],
        };
        let bound = 1.0 / ((9 * c) as f64).sqrt();
        let mut kernels = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
        // Centre tap gain 1 / m0 so that, with zero offsets and the initial
        // modulation m0, the block starts as the level average.
        let centre = k / 2;
        let data = kernels.data_mut();
        for lv in 0..l {
            match cfg.kernel_mode {
                KernelMode::Depthwise => data[lv * k + centre] += CENTRE_GAIN,
                KernelMode::ChannelMixing => {
                    for ch in 0..c {
                        data[((lv * k + centre) * c + ch) * c + ch] += CENTRE_GAIN;
                    }
                }
            }
        }
        let kernels = store.add(format!("{prefix}.spatial.kernels"), kernels)?;
        Ok(SpatialAttnParams {
            points: k,
            predictor_kernel,
            predictor_bias,
            kernels,
            mode: cfg.kernel_mode,
        })
    }
}

/// Intermediate values of the spatial attention.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOutput {
    /// Level-averaged result `[H, W, C]`.
    pub aggregated: Var,
    /// `aggregated` broadcast back to every level, `[L, H, W, C]`.
    pub output: Var,
    /// Predicted `(dy, dx)` offsets, `[H, W, 2K]`.
    pub offsets: Var,
    /// Modulation scalars in `[0, 1]`, `[H, W, K]`.
    pub modulation: Var,
}

/// Modulated deformable sampling aggregated over levels.
///
/// Offsets and modulation are predicted from level `median` only and shared by
/// all levels. For each position the `K` shifted taps of every level are
/// weighted by their kernel and modulation, summed, and averaged over levels.
pub fn spatial_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &SpatialAttnParams,
    x: Var,
    median: usize,
) -> Result<SpatialOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "spatial attention needs an aligned [L, H, W, C] tensor, got {shape:?}"
        )));
    }
    if median >= shape[0] {
        return Err(Error::invalid(format!(
            "median index {median} out of range for {} levels",
            shape[0]
        )));
    }
    let k = p.points;
    tape.set_stage("spatial.predictor");
    let mid = tape.select0(x, median)?;
    let pred = tape.conv2d_3x3(
        mid,
        params.var(p.predictor_kernel),
        params.var(p.predictor_bias),
        1,
    )?;
    let offsets = tape.narrow(pred, 0, 2 * k)?;
    let logits = tape.narrow(pred, 2 * k, k)?;
    let modulation = tape.sigmoid(logits);
    tape.set_stage("spatial.sample");
    let samples = tape.deform_sample(x, offsets, k)?;
    tape.set_stage("spatial.aggregate");
    let aggregated = tape.modulated_aggregate(samples, modulation, params.var(p.kernels), p.mode)?;
    let output = tape.broadcast_to(aggregated, &shape)?;
    Ok(SpatialOutput {
        aggregated,
        output,
        offsets,
        modulation,
    })
}

pub(crate) fn checked_spatial_attention(
    tape: &mut Tape,
    params: &Binding,
    p: &SpatialAttnParams,
    cfg: &BlockConfig,
    x: Var,
) -> Result<SpatialOutput> {
    check_input(tape.shape(x), cfg, "spatial attention")?;
    spatial_attention(tape, params, p, x, median_of(cfg.levels))
}
