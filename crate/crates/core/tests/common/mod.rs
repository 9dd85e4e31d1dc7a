//! Naive reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's kernels; every oracle is an explicit
//! loop over the defining formula.

#![allow(dead_code)]

use dyhead::attention::DescriptorMode;
use dyhead::tensor::KernelMode;
use dyhead::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

pub fn rng(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut Pcg32, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values kept at least `margin` away from every point in `kinks`.
pub fn rand_away_from(rng: &mut Pcg32, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() >= margin) {
            break v;
        }
    })
}

pub fn idx3(shape: &[usize], a: usize, b: usize, c: usize) -> usize {
    (a * shape[1] + b) * shape[2] + c
}

pub fn idx4(shape: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * shape[1] + b) * shape[2] + c) * shape[3] + d
}

/// Tent-kernel form of bilinear interpolation with zero padding:
/// `sum_{y, x} relu(1 - |py - y|) relu(1 - |px - x|) map[y, x, c]`.
pub fn tent_sample(map: &Tensor, py: f64, px: f64) -> Vec<f64> {
    let s = map.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c];
    for y in 0..h {
        let wy = (1.0 - (py - y as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for x in 0..w {
            let wx = (1.0 - (px - x as f64).abs()).max(0.0);
            if wx == 0.0 {
                continue;
            }
            for ch in 0..c {
                out[ch] += wy * wx * map.data()[idx3(s, y, x, ch)];
            }
        }
    }
    out
}

/// Resize with pixel-centre mapping and edge clamping, evaluated per target
/// site.
pub fn resize_oracle(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = map.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        let v = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        v.max(0.0).min((src - 1) as f64)
    };
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let v = tent_sample(map, coord(oy, h, out_h), coord(ox, w, out_w));
            for ch in 0..c {
                let o = idx3(&[out_h, out_w, c], oy, ox, ch);
                out.data_mut()[o] = v[ch];
            }
        }
    }
    out
}

/// `[H, W, Ci] (*) [3, 3, Ci, Co] + b`, zero padding 1.
pub fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let s = x.shape();
    let (h, w, ci) = (s[0], s[1], s[2]);
    let co = k.shape()[3];
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = Tensor::zeros(&[ho, wo, co]);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut acc = b.data()[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as i64 - 1;
                        let ix = (ox * stride + kx) as i64 - 1;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..ci {
                            acc += x.data()[idx3(s, iy as usize, ix as usize, c)]
                                * k.data()[idx4(k.shape(), ky, kx, c, o)];
                        }
                    }
                }
                let off = idx3(&[ho, wo, co], oy, ox, o);
                out.data_mut()[off] = acc;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "{what}: max abs diff {d:e} > {tol:e}");
}

/// Level weights and gated features of the scale attention.
pub fn scale_oracle(x: &Tensor, w: &[f64], b: f64, mode: DescriptorMode) -> (Vec<f64>, Tensor) {
    let s = x.shape();
    let (l, per_level, c) = (s[0], s[1] * s[2] * s[3], s[3]);
    let mut weights = Vec::new();
    for li in 0..l {
        let level = &x.data()[li * per_level..(li + 1) * per_level];
        let logit = match mode {
            DescriptorMode::MeanSc => w[0] * level.iter().sum::<f64>() / per_level as f64 + b,
            DescriptorMode::MeanSLinearC => {
                let positions = per_level / c;
                let mut z = b;
                for ch in 0..c {
                    let m = (0..positions).map(|p| level[p * c + ch]).sum::<f64>() / positions as f64;
                    z += m * w[ch];
                }
                z
            }
        };
        weights.push(hard_sigmoid(logit));
    }
    let out = Tensor::from_fn(s, |i| x.data()[i] * weights[i / per_level]);
    (weights, out)
}

/// Dynamic-ReLU output with coefficients from the two-layer hyper-function.
pub fn task_oracle(x: &Tensor, fc1: &Tensor, b1: &Tensor, fc2: &Tensor, b2: &Tensor, la: f64, lb: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let hidden = b1.len();
    let rows = x.len() / c;
    let g: Vec<f64> = (0..c).map(|ch| (0..rows).map(|i| x.data()[i * c + ch]).sum::<f64>() / rows as f64).collect();
    let h: Vec<f64> = (0..hidden)
        .map(|j| (b1.data()[j] + (0..c).map(|i| g[i] * fc1.data()[i * hidden + j]).sum::<f64>()).max(0.0))
        .collect();
    let raw: Vec<f64> = (0..4 * c)
        .map(|j| b2.data()[j] + (0..hidden).map(|i| h[i] * fc2.data()[i * 4 * c + j]).sum::<f64>())
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64;
    let u: Vec<f64> = raw.iter().map(|v| 2.0 * sigmoid((v - mean) / (var + 1e-5).sqrt()) - 1.0).collect();
    Tensor::from_fn(x.shape(), |i| {
        let ch = i % c;
        let v = x.data()[i];
        let (a1, a2) = (1.0 + la * u[ch], la * u[c + ch]);
        let (bb1, bb2) = (lb * u[2 * c + ch], lb * u[3 * c + ch]);
        (a1 * v + bb1).max(a2 * v + bb2)
    })
}

/// Mean over levels of each level convolved (stride 1, zero padding) with its
/// own 3x3 kernel, given as `[L, 9]` depthwise taps or `[L, 9, C, C]`.
pub fn conv_average_oracle(x: &Tensor, kernels: &Tensor, mode: KernelMode) -> Tensor {
    let s = x.shape();
    let (l, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut sum = Tensor::zeros(&[h, w, c]);
    for li in 0..l {
        let conv_k = Tensor::from_fn(&[3, 3, c, c], |i| {
            let (tap, ci, co) = (i / (c * c), (i / c) % c, i % c);
            match mode {
                KernelMode::Depthwise => {
                    if ci == co {
                        kernels.data()[li * 9 + tap]
                    } else {
                        0.0
                    }
                }
                KernelMode::ChannelMixing => kernels.data()[((li * 9 + tap) * c + ci) * c + co],
            }
        });
        let level = conv_oracle(&x.select0(li), &conv_k, &Tensor::zeros(&[c]), 1);
        for (s, v) in sum.data_mut().iter_mut().zip(level.data()) {
            *s += v / l as f64;
        }
    }
    sum
}
