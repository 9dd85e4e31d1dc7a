//! The finite-difference suite run by the command-line `gradcheck`: every
//! differentiable op, each attention, a full block, a six-block stack and the
//! detection loss.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use crate::attention::{
    scale_attention, spatial_attention, stack_forward, task_attention, BlockConfig,
    DyHeadStack, ScaleAttnParams, SpatialAttnParams, TaskAttnParams,
};
use crate::error::Result;
use crate::head::{assign_targets, default_level_ranges, loss, predict, GridSpec, GroundTruth, HeadParams};
use crate::pyramid::align_pyramid;
use crate::tensor::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::tensor::{Binding, KernelMode, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradcheckReport,
}

fn uniform(rng: &mut Pcg32, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Uniform in `(-2, 2)`, at least 1e-2 away from 0 and +-1.
fn away_from_kinks(rng: &mut Pcg32, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if [-1.0, 0.0, 1.0].iter().all(|k: &f64| (v - k).abs() > 1e-2) {
            break v;
        }
    })
}

/// Integer part plus a fraction in `[0.05, 0.95]`, so bilinear taps stay
/// inside one cell under the finite-difference step.
fn fractional(rng: &mut Pcg32, shape: &[usize], lo: i32, hi: i32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f64 + rng.random_range(0.05..0.95))
}

fn randomized(store: &mut ParamStore, rng: &mut Pcg32) -> Vec<Tensor> {
    for p in store.iter_mut() {
        p.value = uniform(rng, p.value.shape(), 0.5);
    }
    store.values()
}

/// Runs the suite. `fault` scales every analytic gradient by `1 + fault`
/// before comparison, to exercise the failure path.
pub fn gradcheck_suite(fault: Option<f64>) -> Result<Vec<NamedCheck>> {
    let base = GradcheckConfig {
        fault,
        ..GradcheckConfig::default()
    };
    let loose = base.clone().with_tol(1e-4);
    let mut r = Pcg32::seed_from_u64(0x6C4E_C4EC);
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   cfg: &GradcheckConfig,
                   f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = gradcheck(f, &inputs, cfg)?;
        out.push(NamedCheck { name, report });
        Ok(())
    };

    let a = uniform(&mut r, &[3, 4], 1.0);
    let b = uniform(&mut r, &[4], 1.0);
    run("ops/broadcast_add_mul", vec![a.clone(), b], &base, &|t, v| {
        let s = t.add(v[0], v[1])?;
        t.mul(s, v[0])
    })?;

    let x = away_from_kinks(&mut r, &[12]);
    run("ops/pointwise", vec![x], &base, &|t, v| {
        let parts = [
            t.relu(v[0]),
            t.sigmoid(v[0]),
            t.hard_sigmoid(v[0]),
            t.exp_clamped(v[0], 1e4),
            t.standardize(v[0], 1e-5),
        ];
        t.stack(&parts)
    })?;

    let lin = vec![uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[4, 5], 1.0), uniform(&mut r, &[5], 1.0)];
    run("ops/linear", lin, &base, &|t, v| t.linear(v[0], v[1], v[2]))?;

    for (name, stride) in [("ops/conv3x3_stride1", 1), ("ops/conv3x3_stride2", 2)] {
        let inputs = vec![uniform(&mut r, &[5, 4, 2], 1.0), uniform(&mut r, &[3, 3, 2, 3], 1.0), uniform(&mut r, &[3], 1.0)];
        run(name, inputs, &base, &|t, v| t.conv2d_3x3(v[0], v[1], v[2], stride))?;
    }

    run("ops/mean_avg_pool", vec![uniform(&mut r, &[4, 6, 2], 1.0)], &base, &|t, v| {
        let p = t.avg_pool(v[0], 2)?;
        t.mean(p, &[1])
    })?;

    let levels = vec![uniform(&mut r, &[6, 6, 2], 1.0), uniform(&mut r, &[3, 3, 2], 1.0), uniform(&mut r, &[2, 2, 2], 1.0)];
    run("pyramid/align", levels, &base, &|t, v| align_pyramid(t, v))?;

    let map = uniform(&mut r, &[4, 5, 3], 1.0);
    let coords = fractional(&mut r, &[6, 2], -1, 5);
    run("ops/bilinear_sample", vec![map, coords], &base, &|t, v| t.bilinear_sample(v[0], v[1]))?;

    let f = uniform(&mut r, &[2, 4, 4, 3], 1.0);
    let offsets = fractional(&mut r, &[4, 4, 18], -1, 2);
    let modulation = Tensor::from_fn(&[4, 4, 9], |_| r.random_range(0.0..1.0));
    let kernels = uniform(&mut r, &[2, 9, 3, 3], 1.0);
    run("ops/deformable_aggregate", vec![f, offsets, modulation, kernels], &base, &|t, v| {
        let s = t.deform_sample(v[0], v[1], 9)?;
        t.modulated_aggregate(s, v[2], v[3], KernelMode::ChannelMixing)
    })?;

    let logits = uniform(&mut r, &[12], 2.0);
    run("ops/losses", vec![logits], &base, &|t, v| {
        let onehot: Vec<f64> = (0..12).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let soft: Vec<f64> = (0..12).map(|i| (i as f64 + 0.5) / 12.0).collect();
        let mask: Vec<f64> = (0..12).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let fl = t.sigmoid_focal_loss(v[0], onehot, 0.25, 2.0)?;
        let bce = t.bce_kl_loss(v[0], soft.clone(), mask.clone())?;
        let targets: Vec<f64> = soft.iter().map(|s| 3.0 * s - 1.0).collect();
        let l1 = t.l1_loss(v[0], targets, mask)?;
        let s = t.add(fl, bce)?;
        t.add(s, l1)
    })?;

    let cfg = BlockConfig::new(3, 8);
    let shape = [3, 4, 4, 8];

    let mut store = ParamStore::new();
    let p = ScaleAttnParams::new(&mut store, "s", &cfg)?;
    let mut inputs = vec![uniform(&mut r, &shape, 1.0)];
    inputs.extend(randomized(&mut store, &mut r));
    run("attention/scale", inputs, &base, &|t, v| {
        Ok(scale_attention(t, &Binding::from_vars(v[1..].to_vec()), &p, v[0])?.0)
    })?;

    let mut store = ParamStore::new();
    let p = SpatialAttnParams::new(&mut store, "s", &cfg, &mut r)?;
    let mut inputs = vec![uniform(&mut r, &shape, 1.0)];
    inputs.extend(randomized(&mut store, &mut r));
    run("attention/spatial", inputs, &base, &|t, v| {
        Ok(spatial_attention(t, &Binding::from_vars(v[1..].to_vec()), &p, v[0], 1)?.output)
    })?;

    let mut store = ParamStore::new();
    let p = TaskAttnParams::new(&mut store, "s", &cfg, &mut r)?;
    let mut inputs = vec![uniform(&mut r, &shape, 1.0)];
    inputs.extend(randomized(&mut store, &mut r));
    run("attention/task", inputs, &base, &|t, v| {
        Ok(task_attention(t, &Binding::from_vars(v[1..].to_vec()), &p, v[0])?.output)
    })?;

    for (name, depth, gc) in [
        ("block/depth1", 1, base.clone()),
        ("stack/depth6", 6, loose.clone().with_max_entries(60)),
    ] {
        let mut store = ParamStore::new();
        let stack = DyHeadStack::new(&mut store, "s", &cfg, depth, &mut r)?;
        let mut inputs = vec![uniform(&mut r, &shape, 1.0)];
        inputs.extend(randomized(&mut store, &mut r));
        run(name, inputs, &gc, &|t, v| {
            Ok(stack_forward(t, &Binding::from_vars(v[1..].to_vec()), &stack, v[0])?.0)
        })?;
    }

    let grid = GridSpec {
        levels: 2,
        height: 4,
        width: 4,
        stride: 8.0,
    };
    let gt = GroundTruth {
        boxes: vec![[2.0, 3.0, 9.0, 10.0], [10.0, 12.0, 30.0, 28.0]],
        classes: vec![0, 1],
    };
    let targets = assign_targets(&gt, &grid, &default_level_ranges(2), 2)?;
    let mut store = ParamStore::new();
    let p = HeadParams::new(&mut store, "h", 2, 4, 2, &mut r)?;
    let mut inputs = vec![uniform(&mut r, &[2, 4, 4, 4], 1.0)];
    inputs.extend(randomized(&mut store, &mut r));
    run("head/loss", inputs, &loose, &|t, v| {
        let o = predict(t, &Binding::from_vars(v[1..].to_vec()), &p, v[0])?;
        Ok(loss(t, &o, &targets)?.total)
    })?;

    Ok(out)
}
