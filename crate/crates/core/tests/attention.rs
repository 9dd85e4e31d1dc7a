mod common;

use common::*;
use dyhead::attention::{
    apply_dynamic_relu, scale_attention, spatial_attention, stack_forward, task_attention,
    AttentionSet, BlockConfig, DescriptorMode, DyHeadStack, ScaleAttnParams,
    SpatialAttnParams, TaskAttnParams,
};
use dyhead::tensor::gradcheck::{gradcheck, GradcheckConfig};
use dyhead::tensor::{Binding, KernelMode, ParamStore};
use dyhead::{Tape, Tensor};
use rand::Rng;
use rand_pcg::Pcg32;

fn randomize(store: &mut ParamStore, r: &mut Pcg32, bound: f64) {
    for p in store.iter_mut() {
        p.value = Tensor::from_fn(p.value.shape(), |_| r.random_range(-bound..bound));
    }
}

// ------------------------------------------------------------------ scale

fn run_scale(cfg: &BlockConfig, x: &Tensor, w: Option<Tensor>, b: Option<f64>) -> (Tensor, Tensor) {
    let mut store = ParamStore::new();
    let p = ScaleAttnParams::new(&mut store, "s", cfg).unwrap();
    if let Some(w) = w {
        store.get_mut(p.f_weight).value = w;
    }
    if let Some(b) = b {
        store.get_mut(p.f_bias).value = Tensor::full(&[1], b);
    }
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vx = tape.constant(x.clone());
    let (out, weights) = scale_attention(&mut tape, &bind, &p, vx).unwrap();
    (tape.value(out).clone(), tape.value(weights).clone())
}

#[test]
fn scale_identity_and_full_gating() {
    let mut r = rng(1);
    let cfg = BlockConfig::new(3, 4);
    let x = rand_tensor(&mut r, &[3, 2, 2, 4]);
    let (out, w) = run_scale(&cfg, &x, None, None);
    assert_eq!(w.data(), &[1.0, 1.0, 1.0]);
    assert_eq!(out.data(), x.data());
    let (out, w) = run_scale(&cfg, &x, None, Some(-1.0));
    assert_eq!(w.data(), &[0.0, 0.0, 0.0]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scale_matches_scalar_oracle() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let mode = if seed % 2 == 0 { DescriptorMode::MeanSc } else { DescriptorMode::MeanSLinearC };
        let (l, h, w, c) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5), r.random_range(1..6));
        let mut cfg = BlockConfig::new(l, c);
        cfg.descriptor_mode = mode;
        let x = rand_tensor(&mut r, &[l, h, w, c]);
        let wshape: Vec<usize> = match mode {
            DescriptorMode::MeanSc => vec![1],
            DescriptorMode::MeanSLinearC => vec![c, 1],
        };
        let wt = Tensor::from_fn(&wshape, |_| r.random_range(-3.0..3.0));
        let b = r.random_range(-1.0..1.0);
        let (want_w, want) = scale_oracle(&x, wt.data(), b, mode);
        let (out, weights) = run_scale(&cfg, &x, Some(wt), Some(b));
        assert_close(&weights, &Tensor::new(&[l], want_w).unwrap(), 1e-12, "scale weights");
        assert_close(&out, &want, 1e-12, "scale output");
    }
}

#[test]
fn scale_weight_on_constant_input() {
    let cfg = BlockConfig::new(2, 3);
    for (c, w, b) in [(0.7, 0.5, 0.1), (-2.0, 0.3, 0.4), (5.0, 1.0, 0.0), (-1.0, -2.0, 0.5)] {
        let x = Tensor::full(&[2, 3, 3, 3], c);
        let (_, weights) = run_scale(&cfg, &x, Some(Tensor::full(&[1], w)), Some(b));
        for &v in weights.data() {
            assert!((v - hard_sigmoid(w * c + b)).abs() < 1e-14);
        }
    }
}

// ---------------------------------------------------------------- spatial

struct SpatialCase {
    store: ParamStore,
    p: SpatialAttnParams,
}

fn spatial_case(cfg: &BlockConfig, r: &mut Pcg32) -> SpatialCase {
    let mut store = ParamStore::new();
    let p = SpatialAttnParams::new(&mut store, "sp", cfg, r).unwrap();
    SpatialCase { store, p }
}

fn run_spatial(case: &SpatialCase, x: &Tensor, median: usize) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let bind = case.store.bind(&mut tape);
    let vx = tape.constant(x.clone());
    let s = spatial_attention(&mut tape, &bind, &case.p, vx, median).unwrap();
    (
        tape.value(s.aggregated).clone(),
        tape.value(s.output).clone(),
        tape.value(s.modulation).clone(),
    )
}

/// Zero offsets and modulation logits large enough that sigmoid rounds to 1.
fn force_unit_modulation(case: &mut SpatialCase) {
    let k = case.p.points;
    let kernel_shape = case.store.get(case.p.predictor_kernel).value.shape().to_vec();
    case.store.get_mut(case.p.predictor_kernel).value = Tensor::zeros(&kernel_shape);
    case.store.get_mut(case.p.predictor_bias).value =
        Tensor::from_fn(&[3 * k], |i| if i < 2 * k { 0.0 } else { 40.0 });
}

#[test]
fn spatial_degenerate_is_level_mean() {
    let mut r = rng(2);
    let cfg = BlockConfig::new(3, 4);
    let mut case = spatial_case(&cfg, &mut r);
    force_unit_modulation(&mut case);
    case.store.get_mut(case.p.kernels).value = Tensor::from_fn(&[3, 9], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    let x = rand_tensor(&mut r, &[3, 4, 5, 4]);
    let (agg, out, m) = run_spatial(&case, &x, 1);
    assert!(m.data().iter().all(|&v| v == 1.0));
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let mean = tape.mean(vx, &[0]).unwrap();
    assert_close(&agg, tape.value(mean), 1e-12, "level mean");
    for l in 0..3 {
        assert_eq!(out.select0(l).data(), agg.data());
    }
}

#[test]
fn spatial_zero_offsets_equal_conv_average() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let mode = if seed % 2 == 0 { KernelMode::Depthwise } else { KernelMode::ChannelMixing };
        let (l, h, w, c) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..6), r.random_range(1..4));
        let mut cfg = BlockConfig::new(l, c);
        cfg.kernel_mode = mode;
        let mut case = spatial_case(&cfg, &mut r);
        force_unit_modulation(&mut case);
        let x = rand_tensor(&mut r, &[l, h, w, c]);
        let (agg, _, _) = run_spatial(&case, &x, (l - 1) / 2);

        let sum = conv_average_oracle(&x, &case.store.get(case.p.kernels).value, mode);
        assert_close(&agg, &sum, 1e-12, "conv average");
    }
}

#[test]
fn spatial_random_offsets_match_sampling_loop() {
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let (l, h, w, c) = (2, 5, 5, 3);
        let cfg = BlockConfig::new(l, c);
        let mut case = spatial_case(&cfg, &mut r);
        randomize(&mut case.store, &mut r, 0.6);
        let x = rand_tensor(&mut r, &[l, h, w, c]);
        let (agg, _, modulation) = run_spatial(&case, &x, 0);

        let pk = &case.store.get(case.p.predictor_kernel).value;
        let pb = &case.store.get(case.p.predictor_bias).value;
        let kernels = &case.store.get(case.p.kernels).value;
        let pred = conv_oracle(&x.select0(0), pk, pb, 1);
        let mut want = Tensor::zeros(&[h, w, c]);
        let mut want_m = Tensor::zeros(&[h, w, 9]);
        for y in 0..h {
            for xx in 0..w {
                let at = |ch: usize| pred.data()[idx3(pred.shape(), y, xx, ch)];
                for k in 0..9 {
                    let m = sigmoid(at(18 + k));
                    want_m.data_mut()[(y * w + xx) * 9 + k] = m;
                    let py = y as f64 + (k / 3) as f64 - 1.0 + at(2 * k);
                    let px = xx as f64 + (k % 3) as f64 - 1.0 + at(2 * k + 1);
                    for li in 0..l {
                        let s = tent_sample(&x.select0(li), py, px);
                        for ch in 0..c {
                            want.data_mut()[(y * w + xx) * c + ch] += kernels.data()[li * 9 + k] * m * s[ch] / l as f64;
                        }
                    }
                }
            }
        }
        assert_close(&modulation, &want_m, 1e-12, "modulation");
        assert_close(&agg, &want, 1e-12, "deformable output");
    }
}

// ------------------------------------------------------------------- task

#[test]
fn task_init_is_relu() {
    let mut r = rng(3);
    let cfg = BlockConfig::new(2, 8);
    let mut store = ParamStore::new();
    let p = TaskAttnParams::new(&mut store, "t", &cfg, &mut r).unwrap();
    let x = rand_tensor(&mut r, &[2, 3, 3, 8]);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vx = tape.constant(x.clone());
    let t = task_attention(&mut tape, &bind, &p, vx).unwrap();
    assert!(tape.value(t.u).data().iter().all(|&v| v == 0.0));
    let want: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.value(t.output).data(), &want[..]);
}

#[test]
fn injected_equal_branches_are_identity() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[2, 3, 3, 5]);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let coefs = tape.constant(Tensor::from_fn(&[4, 5], |i| if i < 10 { 1.0 } else { 0.0 }));
    let y = apply_dynamic_relu(&mut tape, vx, coefs).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn task_matches_channel_loop_oracle() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let mut cfg = BlockConfig::new(2, 8);
        cfg.lambda_a = r.random_range(0.1..2.0);
        cfg.lambda_b = r.random_range(0.1..1.0);
        let mut store = ParamStore::new();
        let p = TaskAttnParams::new(&mut store, "t", &cfg, &mut r).unwrap();
        randomize(&mut store, &mut r, 1.0);
        let x = rand_tensor(&mut r, &[2, 2, 3, 8]);
        let v = |id| store.get(id).value.clone();
        let want = task_oracle(&x, &v(p.fc1_weight), &v(p.fc1_bias), &v(p.fc2_weight), &v(p.fc2_bias), cfg.lambda_a, cfg.lambda_b);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let vx = tape.constant(x);
        let t = task_attention(&mut tape, &bind, &p, vx).unwrap();
        assert_close(tape.value(t.output), &want, 1e-12, "task output");
    }
}

#[test]
fn reduction_must_divide_channels() {
    let mut r = rng(0);
    let mut store = ParamStore::new();
    let mut cfg = BlockConfig::new(2, 6);
    cfg.reduction = 4;
    assert!(TaskAttnParams::new(&mut store, "t", &cfg, &mut r).is_err());
    assert!(cfg.validate().is_err());
}

// ------------------------------------------------------------------ block

fn new_stack(cfg: &BlockConfig, depth: usize, seed: u64) -> (ParamStore, DyHeadStack) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let stack = DyHeadStack::new(&mut store, "head", cfg, depth, &mut r).unwrap();
    (store, stack)
}

fn run_stack(store: &ParamStore, stack: &DyHeadStack, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vx = tape.constant(x.clone());
    let (out, _) = stack_forward(&mut tape, &bind, stack, vx).unwrap();
    tape.value(out).clone()
}

#[test]
fn identity_settings_compose_to_identity() {
    let cfg = BlockConfig::new(1, 8);
    let (mut store, stack) = new_stack(&cfg, 1, 5);
    let block = &stack.blocks[0];
    let sp = block.spatial.as_ref().unwrap();
    let mut case = SpatialCase { store: std::mem::take(&mut store), p: sp.clone() };
    force_unit_modulation(&mut case);
    case.store.get_mut(sp.kernels).value = Tensor::from_fn(&[1, 9], |i| if i == 4 { 1.0 } else { 0.0 });
    let mut r = rng(6);
    let x = Tensor::from_fn(&[1, 4, 4, 8], |_| r.random_range(0.0..2.0));
    let out = run_stack(&case.store, &stack, &x);
    assert_close(&out, &x, 1e-15, "identity block");
}

#[test]
fn depth_zero_is_passthrough_and_depth_two_composes() {
    let cfg = BlockConfig::new(3, 8);
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[3, 4, 4, 8]);
    let (store, stack) = new_stack(&cfg, 0, 1);
    assert_eq!(run_stack(&store, &stack, &x).data(), x.data());

    let (mut store, stack) = new_stack(&cfg, 2, 1);
    randomize(&mut store, &mut r, 0.4);
    let both = run_stack(&store, &stack, &x);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vx = tape.constant(x);
    let t0 = stack.blocks[0].forward(&mut tape, &bind, vx).unwrap();
    let t1 = stack.blocks[1].forward(&mut tape, &bind, t0.output).unwrap();
    assert_eq!(tape.value(t1.output).data(), both.data());
}

#[test]
fn every_ablation_cell_preserves_shape() {
    let mut r = rng(8);
    for (i, set) in AttentionSet::ablation_grid().into_iter().enumerate() {
        for mode in [KernelMode::Depthwise, KernelMode::ChannelMixing] {
            let (l, h, w) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..6));
            let mut cfg = BlockConfig::new(l, 8);
            cfg.attentions = set;
            cfg.kernel_mode = mode;
            let (store, stack) = new_stack(&cfg, 2, i as u64);
            let x = rand_tensor(&mut r, &[l, h, w, 8]);
            let out = run_stack(&store, &stack, &x);
            assert_eq!(out.shape(), x.shape(), "{}", set.label());
            assert!(out.is_finite());
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = BlockConfig::new(3, 8);
    let (store, stack) = new_stack(&cfg, 1, 0);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let bad = tape.constant(Tensor::zeros(&[2, 4, 4, 8]));
    assert!(stack_forward(&mut tape, &bind, &stack, bad).is_err());
}

#[test]
fn attention_ranges_hold_over_random_forwards() {
    let cfg = BlockConfig::new(3, 8);
    let (mut store, stack) = new_stack(&cfg, 1, 9);
    let mut r = rng(9);
    for i in 0..1000 {
        if i % 50 == 0 {
            randomize(&mut store, &mut r, 3.0);
        }
        let x = Tensor::from_fn(&[3, 3, 3, 8], |_| r.random_range(-10.0..10.0));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let vx = tape.constant(x);
        let (out, traces) = stack_forward(&mut tape, &bind, &stack, vx).unwrap();
        assert!(tape.value(out).is_finite());
        let t = traces[0];
        assert!(tape.value(t.scale_weights.unwrap()).data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(tape.value(t.modulation.unwrap()).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let u = tape.value(t.task_u.unwrap());
        assert!(u.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

fn block_gradcheck(cfg: &BlockConfig, depth: usize, seed: u64, gc: GradcheckConfig) -> f64 {
    let (mut store, stack) = new_stack(cfg, depth, seed);
    let mut r = rng(seed + 1000);
    randomize(&mut store, &mut r, 0.5);
    let x = rand_tensor(&mut r, &[cfg.levels, 4, 4, cfg.channels]);
    let mut inputs = vec![x];
    inputs.extend(store.values());
    let rep = gradcheck(
        |tape: &mut Tape, v| {
            let bind = Binding::from_vars(v[1..].to_vec());
            Ok(stack_forward(tape, &bind, &stack, v[0])?.0)
        },
        &inputs,
        &gc,
    )
    .unwrap();
    assert!(rep.passed(), "max rel error {:e}", rep.max_rel_error);
    rep.max_rel_error
}

#[test]
fn block_gradcheck_depth_one() {
    block_gradcheck(&BlockConfig::new(3, 8), 1, 21, GradcheckConfig::default());
    let mut cfg = BlockConfig::new(3, 6);
    cfg.reduction = 2;
    block_gradcheck(&cfg, 1, 22, GradcheckConfig::default());
}

#[test]
fn block_gradcheck_other_modes() {
    let mut cfg = BlockConfig::new(3, 8);
    cfg.kernel_mode = KernelMode::ChannelMixing;
    cfg.descriptor_mode = DescriptorMode::MeanSLinearC;
    block_gradcheck(&cfg, 1, 23, GradcheckConfig::default());
}

#[test]
fn stack_gradcheck_depth_six() {
    let cfg = BlockConfig::new(3, 8);
    block_gradcheck(&cfg, 6, 24, GradcheckConfig::default().with_tol(1e-4).with_max_entries(60));
}

#[test]
fn gradcheck_detects_injected_fault() {
    let cfg = BlockConfig::new(2, 4);
    let (mut store, stack) = new_stack(&cfg, 1, 3);
    let mut r = rng(3);
    randomize(&mut store, &mut r, 0.5);
    let mut inputs = vec![rand_tensor(&mut r, &[2, 3, 3, 4])];
    inputs.extend(store.values());
    let cfg_fault = GradcheckConfig { fault: Some(1e-3), ..GradcheckConfig::default() };
    let rep = gradcheck(
        |tape: &mut Tape, v| {
            let bind = Binding::from_vars(v[1..].to_vec());
            Ok(stack_forward(tape, &bind, &stack, v[0])?.0)
        },
        &inputs,
        &cfg_fault,
    )
    .unwrap();
    assert!(!rep.passed());
}
