use std::collections::BTreeMap;

use super::broadcast::{broadcast_shape, source_index};
use super::sample::{in_grid, resize_stencil, sample_into, Taps};
use super::{DType, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight structure of the per-level sampling kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelMode {
    /// One scalar per (level, sampling point), shared by every channel.
    #[default]
    Depthwise,
    /// A full `C x C` matrix per (level, sampling point).
    ChannelMixing,
}

enum Op {
    Leaf,
    Add(Var, Var, Option<(Vec<usize>, Vec<usize>)>),
    Mul(Var, Var, Option<(Vec<usize>, Vec<usize>)>),
    Max(Var, Var, Option<(Vec<usize>, Vec<usize>)>),
    Relu(Var),
    Sigmoid(Var),
    HardSigmoid(Var),
    ExpClamp(Var, f64),
    Affine(Var, f64),
    Linear(Var, Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Mean(Var, Vec<usize>, usize),
    Sum(Var),
    Reshape(Var),
    Broadcast(Var, Vec<usize>),
    Select0(Var, usize),
    Stack(Vec<Var>),
    Narrow(Var, usize),
    Resize(Var),
    Sample(Var, Var),
    DeformSample {
        features: Var,
        offsets: Var,
        base: Vec<(isize, isize)>,
    },
    ModAggregate {
        samples: Var,
        modulation: Var,
        kernels: Var,
        mode: KernelMode,
    },
    Standardize(Var, f64),
    AvgPool(Var, usize),
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    BceKl {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
    },
    L1 {
        pred: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Values are immutable once pushed; [`Tape::backward`] replays the record in
/// reverse. Every op also reports its multiply-accumulate count to the stage
/// set with [`Tape::set_stage`].
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
    stage: String,
    macs: BTreeMap<String, u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn entropy(t: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(t) + term(1.0 - t)
}

pub(crate) fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Side length of the square sampling grid for `k` points.
pub(crate) fn grid_side(k: usize) -> Option<usize> {
    let side = (k as f64).sqrt().round() as usize;
    (side * side == k && side % 2 == 1).then_some(side)
}

/// The `k` base positions of a square grid centred on the origin, row-major.
pub fn base_offsets(k: usize) -> Result<Vec<(isize, isize)>> {
    let side = grid_side(k).ok_or_else(|| {
        Error::invalid(format!("sampling-point count {k} is not an odd square"))
    })?;
    let r = (side / 2) as isize;
    Ok((-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect())
}

impl Tape {
    pub fn new() -> Self {
        Self::with_dtype(DType::F64)
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Tape {
            nodes: Vec::new(),
            dtype,
            stage: String::new(),
            macs: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Names the stage that subsequent ops charge their MACs to.
    pub fn set_stage(&mut self, stage: &str) {
        self.stage.clear();
        self.stage.push_str(stage);
    }

    /// MACs executed so far, per stage.
    pub fn macs(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn count(&mut self, macs: u64) {
        if macs > 0 {
            *self.macs.entry(self.stage.clone()).or_default() += macs;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value: value.to_dtype(self.dtype),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that gradients flow into.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a value treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary_maps(&self, a: Var, b: Var) -> Result<(Vec<usize>, Option<(Vec<usize>, Vec<usize>)>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), None));
        }
        let out = broadcast_shape(sa, sb)?;
        let ia = source_index(sa, &out);
        let ib = source_index(sb, &out);
        Ok((out, Some((ia, ib))))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Option<(Vec<usize>, Vec<usize>)>) -> Op,
    ) -> Result<Var> {
        let (shape, maps) = self.binary_maps(a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match &maps {
            None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Some((ia, ib)) => ia.iter().zip(ib).map(|(&i, &j)| f(da[i], db[j])).collect(),
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, make(maps), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |m| Op::Add(a, b, m))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y, |m| Op::Mul(a, b, m))?;
        let n = self.value(v).len() as u64;
        self.count(n);
        Ok(v)
    }

    /// Elementwise maximum; ties select `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, |m| Op::Max(a, b, m))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("unary preserves shape");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `max(0, min(1, (x + 1) / 2))`.
    pub fn hard_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, hard_sigmoid, Op::HardSigmoid(x))
    }

    /// `min(exp(x), max)`.
    pub fn exp_clamped(&mut self, x: Var, max: f64) -> Var {
        self.unary(x, |v| v.exp().min(max), Op::ExpClamp(x, max))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let n = self.value(x).len() as u64;
        self.count(n);
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    /// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let cin = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || xs.is_empty() || ws[0] != cin {
            return Err(Error::Shape {
                lhs: xs,
                rhs: ws,
                context: "linear input vs weight",
            });
        }
        let cout = ws[1];
        if bs != [cout] {
            return Err(Error::Shape {
                lhs: ws,
                rhs: bs,
                context: "linear weight vs bias",
            });
        }
        let rows = self.value(x).len() / cin;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(rows * cout);
        for r in 0..rows {
            let xr = &xd[r * cin..(r + 1) * cin];
            let start = out.len();
            out.extend_from_slice(bd);
            let yr = &mut out[start..];
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &wd[i * cout..(i + 1) * cout];
                for (y, &wv) in yr.iter_mut().zip(wr) {
                    *y += xv * wv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        self.count((rows * cin * cout) as u64);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Linear(x, w, b), &[x, w, b]))
    }

    /// 3x3 cross-correlation with zero padding 1 on an `[H, W, C_in]` map.
    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != xs[2] {
            return Err(Error::Shape {
                lhs: xs,
                rhs: ks,
                context: "conv2d_3x3 input vs kernel",
            });
        }
        if stride == 0 || xs[0] == 0 || xs[1] == 0 {
            return Err(Error::invalid("conv2d_3x3 needs stride >= 1 and a non-empty map"));
        }
        let (h, w, ci, co) = (xs[0], xs[1], xs[2], ks[3]);
        if self.shape(bias) != [co] {
            return Err(Error::Shape {
                lhs: ks,
                rhs: self.shape(bias).to_vec(),
                context: "conv2d_3x3 kernel vs bias",
            });
        }
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let (xd, kd, bd) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; ho * wo * co];
        let mut macs = 0u64;
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                o.copy_from_slice(bd);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        let Some(site) = in_grid(iy, ix, h, w) else { continue };
                        macs += (ci * co) as u64;
                        let xr = &xd[site * ci..(site + 1) * ci];
                        for (c, &xv) in xr.iter().enumerate() {
                            let kr = &kd[((ky * 3 + kx) * ci + c) * co..][..co];
                            for (y, &kv) in o.iter_mut().zip(kr) {
                                *y += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        self.count(macs);
        let value = Tensor::new(&[ho, wo, co], out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, bias, stride }, &[x, kernel, bias]))
    }

    /// Arithmetic mean over `axes`, which are removed from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("mean over an empty axis set"));
        }
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid(format!(
                "mean axes {axes:?} out of range for shape {shape:?}"
            )));
        }
        let reduced: Vec<bool> = (0..shape.len()).map(|i| axes.contains(&i)).collect();
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // Output index of every input element.
        let keep_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let map = source_index(&keep_shape, &shape);
        let inv = 1.0 / count as f64;
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (&o, &v) in map.iter().zip(self.data(x)) {
            out[o] += v * inv;
        }
        self.count(map.len() as u64);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Mean(x, map, count), &[x]))
    }

    /// Sum of all elements to a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if broadcast_shape(&src, shape)? != shape {
            return Err(Error::Shape {
                lhs: src,
                rhs: shape.to_vec(),
                context: "broadcast_to",
            });
        }
        let map = source_index(&src, shape);
        let xd = self.data(x);
        let data = map.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Broadcast(x, map), &[x]))
    }

    /// Slice `index` of the leading axis.
    pub fn select0(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::invalid(format!(
                "select0 index {index} out of range for {shape:?}"
            )));
        }
        let value = self.value(x).select0(index);
        Ok(self.push(value, Op::Select0(x, index), &[x]))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::stack(&tensors)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("narrow on a scalar"))?;
        if start + len > c {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) out of range for last axis {c}",
                start + len
            )));
        }
        let xd = self.data(x);
        let data: Vec<f64> = xd
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Narrow(x, start), &[x]))
    }

    /// Bilinear resize of an `[H, W, C]` map to `[out_h, out_w, C]`, sampling
    /// at target pixel centres mapped proportionally into the source.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] == 0 || xs[1] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!(
                "resize_bilinear from {xs:?} to {out_h}x{out_w}"
            )));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let sy = resize_stencil(h, out_h);
        let sx = resize_stencil(w, out_w);
        let xd = self.data(x);
        let mut out = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, wy)) in sy.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in sx.iter().enumerate() {
                let o = &mut out[(oy * out_w + ox) * c..][..c];
                for (yy, xx, wt) in [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ] {
                    let src = &xd[(yy * w + xx) * c..][..c];
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov += wt * sv;
                    }
                }
            }
        }
        self.count((out_h * out_w * c * 4) as u64);
        let value = Tensor::new(&[out_h, out_w, c], out)?;
        Ok(self.push(value, Op::Resize(x), &[x]))
    }

    /// Samples an `[H, W, C]` map at `N` fractional locations given as an
    /// `[N, 2]` tensor of `(y, x)`; differentiable in both map and locations.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        if xs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::Shape {
                lhs: xs,
                rhs: cs,
                context: "bilinear_sample map vs coordinates",
            });
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let cd = self.data(coords);
        if cd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates".into()));
        }
        let xd = self.data(x);
        let n = cs[0];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let taps = Taps::new(cd[2 * i], cd[2 * i + 1]);
            sample_into(xd, h, w, c, &taps, 1.0, &mut out[i * c..(i + 1) * c]);
        }
        self.count((n * c * 4) as u64);
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::Sample(x, coords), &[x, coords]))
    }

    /// Deformable sampling: for every level `l`, point `k` and position
    /// `p = (y, x)`, samples `features[l]` at `p + base[k] + offsets[p, k]`.
    ///
    /// `features` is `[L, H, W, C]`, `offsets` is `[H, W, 2K]` holding
    /// `(dy, dx)` pairs; the result is `[L, K, H, W, C]`.
    pub fn deform_sample(&mut self, features: Var, offsets: Var, k: usize) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let os = self.shape(offsets).to_vec();
        let base = base_offsets(k)?;
        if fs.len() != 4 || os.len() != 3 || os[0] != fs[1] || os[1] != fs[2] || os[2] != 2 * k {
            return Err(Error::Shape {
                lhs: fs,
                rhs: os,
                context: "deform_sample features vs offsets",
            });
        }
        let (l, h, w, c) = (fs[0], fs[1], fs[2], fs[3]);
        let od = self.data(offsets);
        if od.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampling offsets".into()));
        }
        let fd = self.data(features);
        let plane = h * w * c;
        let mut out = vec![0.0; l * k * plane];
        for li in 0..l {
            let map = &fd[li * plane..(li + 1) * plane];
            for (ki, &(by, bx)) in base.iter().enumerate() {
                let dst = &mut out[(li * k + ki) * plane..][..plane];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let py = (y as isize + by) as f64 + od[p * 2 * k + 2 * ki];
                        let px = (x as isize + bx) as f64 + od[p * 2 * k + 2 * ki + 1];
                        let taps = Taps::new(py, px);
                        sample_into(map, h, w, c, &taps, 1.0, &mut dst[p * c..(p + 1) * c]);
                    }
                }
            }
        }
        self.count((l * k * h * w * c * 4) as u64);
        let value = Tensor::new(&[l, k, h, w, c], out)?;
        Ok(self.push(value, Op::DeformSample { features, offsets, base }, &[features, offsets]))
    }

    /// Level-averaged modulated aggregation of deformable samples.
    ///
    /// `samples` is `[L, K, H, W, C]`, `modulation` is `[H, W, K]`, kernels are
    /// `[L, K]` (depthwise) or `[L, K, C, C]` (channel mixing). Returns
    /// `(1/L) sum_l sum_k w[l, k] * modulation[p, k] * samples[l, k, p]`.
    pub fn modulated_aggregate(
        &mut self,
        samples: Var,
        modulation: Var,
        kernels: Var,
        mode: KernelMode,
    ) -> Result<Var> {
        let ss = self.shape(samples).to_vec();
        let ms = self.shape(modulation).to_vec();
        let ks = self.shape(kernels).to_vec();
        if ss.len() != 5 || ms != [ss[2], ss[3], ss[1]] {
            return Err(Error::Shape {
                lhs: ss,
                rhs: ms,
                context: "modulated_aggregate samples vs modulation",
            });
        }
        let (l, k, h, w, c) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
        let want: Vec<usize> = match mode {
            KernelMode::Depthwise => vec![l, k],
            KernelMode::ChannelMixing => vec![l, k, c, c],
        };
        if ks != want {
            return Err(Error::Shape {
                lhs: want,
                rhs: ks,
                context: "modulated_aggregate kernels",
            });
        }
        let s = h * w;
        let (sd, md, kd) = (self.data(samples), self.data(modulation), self.data(kernels));
        let mut acc = vec![0.0; s * c];
        let mut macs = 0u64;
        match mode {
            KernelMode::Depthwise => {
                for li in 0..l {
                    for ki in 0..k {
                        let wk = kd[li * k + ki];
                        let src = &sd[(li * k + ki) * s * c..][..s * c];
                        for p in 0..s {
                            let coef = wk * md[p * k + ki];
                            for (a, &v) in acc[p * c..(p + 1) * c].iter_mut().zip(&src[p * c..]) {
                                *a += coef * v;
                            }
                        }
                    }
                }
                macs += (l * k * s * (1 + c)) as u64;
            }
            KernelMode::ChannelMixing => {
                let mut t = vec![0.0; c];
                for li in 0..l {
                    for ki in 0..k {
                        let wm = &kd[(li * k + ki) * c * c..][..c * c];
                        let src = &sd[(li * k + ki) * s * c..][..s * c];
                        for p in 0..s {
                            let m = md[p * k + ki];
                            for (tv, &v) in t.iter_mut().zip(&src[p * c..(p + 1) * c]) {
                                *tv = m * v;
                            }
                            let a = &mut acc[p * c..(p + 1) * c];
                            for (ci, &tv) in t.iter().enumerate() {
                                for (av, &wv) in a.iter_mut().zip(&wm[ci * c..(ci + 1) * c]) {
                                    *av += tv * wv;
                                }
                            }
                        }
                    }
                }
                macs += (l * k * s * (c + c * c)) as u64;
            }
        }
        let inv = 1.0 / l as f64;
        for a in &mut acc {
            *a *= inv;
        }
        macs += (s * c) as u64;
        self.count(macs);
        let value = Tensor::new(&[h, w, c], acc)?;
        Ok(self.push(
            value,
            Op::ModAggregate {
                samples,
                modulation,
                kernels,
                mode,
            },
            &[samples, modulation, kernels],
        ))
    }

    /// Standardises all entries to zero mean and unit variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Var {
        let xd = self.data(x);
        let n = xd.len() as f64;
        let mean = xd.iter().map(|v| v / n).sum::<f64>();
        let var = xd.iter().map(|v| (v - mean) * (v - mean) / n).sum::<f64>();
        let inv_std = 1.0 / (var + eps).sqrt();
        let data = xd.iter().map(|v| (v - mean) * inv_std).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.count(3 * xd.len() as u64);
        self.push(value, Op::Standardize(x, eps), &[x])
    }

    /// Non-overlapping `factor x factor` average pooling of an `[H, W, C]` map.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || factor == 0 || xs[0] % factor != 0 || xs[1] % factor != 0 {
            return Err(Error::invalid(format!(
                "avg_pool factor {factor} does not tile {xs:?}"
            )));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / factor) * wo + xx / factor) * c;
                for ch in 0..c {
                    out[o + ch] += xd[(y * w + xx) * c + ch] * inv;
                }
            }
        }
        self.count((h * w * c) as u64);
        let value = Tensor::new(&[ho, wo, c], out)?;
        Ok(self.push(value, Op::AvgPool(x, factor), &[x]))
    }

    fn check_targets(&self, x: Var, targets: &[f64], what: &'static str) -> Result<()> {
        if self.value(x).len() != targets.len() {
            return Err(Error::Shape {
                lhs: self.shape(x).to_vec(),
                rhs: vec![targets.len()],
                context: what,
            });
        }
        Ok(())
    }

    /// Summed sigmoid focal loss against 0/1 targets.
    pub fn sigmoid_focal_loss(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        self.check_targets(logits, &targets, "focal loss targets")?;
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| {
                let p = sigmoid(x);
                // log p = -softplus(-x), log(1 - p) = -softplus(x)
                t * alpha * (1.0 - p).powf(gamma) * softplus(-x)
                    + (1.0 - t) * (1.0 - alpha) * p.powf(gamma) * softplus(x)
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            },
            &[logits],
        ))
    }

    /// Masked sum of binary cross-entropy minus the target entropy, so the
    /// optimum is exactly zero for soft targets as well.
    pub fn bce_kl_loss(&mut self, logits: Var, targets: Vec<f64>, mask: Vec<f64>) -> Result<Var> {
        self.check_targets(logits, &targets, "bce targets")?;
        self.check_targets(logits, &mask, "bce mask")?;
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(&targets)
            .zip(&mask)
            .map(|((&x, &t), &m)| m * ((softplus(x) - t * x) - entropy(t)).max(0.0))
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::BceKl { logits, targets, mask }, &[logits]))
    }

    /// Masked sum of absolute errors.
    pub fn l1_loss(&mut self, pred: Var, targets: Vec<f64>, mask: Vec<f64>) -> Result<Var> {
        self.check_targets(pred, &targets, "l1 targets")?;
        self.check_targets(pred, &mask, "l1 mask")?;
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(&targets)
            .zip(&mask)
            .map(|((&p, &t), &m)| m * (p - t).abs())
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::L1 { pred, targets, mask }, &[pred]))
    }

    /// Reverse pass from a scalar. Gradients of every node are returned;
    /// nothing on the tape is modified, so calling twice yields the same result.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Lazily allocated gradient buffer of a parent, or None if untracked.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, maps) => {
                for (v, side) in [(*a, 0), (*b, 1)] {
                    if let Some(ga) = buf!(v) {
                        match maps {
                            None => ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s),
                            Some(m) => {
                                let idx = if side == 0 { &m.0 } else { &m.1 };
                                idx.iter().zip(g).for_each(|(&j, &s)| ga[j] += s);
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, maps) => {
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let n = g.len();
                let (ia, ib): (Vec<usize>, Vec<usize>) = match maps {
                    None => ((0..n).collect(), (0..n).collect()),
                    Some((x, y)) => (x.clone(), y.clone()),
                };
                if let Some(ga) = buf!(*a) {
                    for k in 0..n {
                        ga[ia[k]] += g[k] * db[ib[k]];
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for k in 0..n {
                        gb[ib[k]] += g[k] * da[ia[k]];
                    }
                }
            }
            Op::Max(a, b, maps) => {
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let n = g.len();
                let (ia, ib): (Vec<usize>, Vec<usize>) = match maps {
                    None => ((0..n).collect(), (0..n).collect()),
                    Some((x, y)) => (x.clone(), y.clone()),
                };
                let pick_a: Vec<bool> = (0..n).map(|k| da[ia[k]] >= db[ib[k]]).collect();
                if let Some(ga) = buf!(*a) {
                    for k in 0..n {
                        if pick_a[k] {
                            ga[ia[k]] += g[k];
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for k in 0..n {
                        if !pick_a[k] {
                            gb[ib[k]] += g[k];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        if xd[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::HardSigmoid(x) => {
                let xd = self.data(*x);
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        if xd[k] > -1.0 && xd[k] < 1.0 {
                            gx[k] += 0.5 * g[k];
                        }
                    }
                }
            }
            Op::ExpClamp(x, max) => {
                let xd = self.data(*x);
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        if xd[k].exp() < *max {
                            gx[k] += g[k] * out[k];
                        }
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += scale * s);
                }
            }
            Op::Linear(x, w, b) => {
                let cin = self.shape(*w)[0];
                let cout = self.shape(*w)[1];
                let rows = g.len() / cout;
                let (xd, wd) = (self.data(*x).to_vec(), self.data(*w).to_vec());
                if let Some(gx) = buf!(*x) {
                    for r in 0..rows {
                        let gr = &g[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            let wr = &wd[i * cout..(i + 1) * cout];
                            gx[r * cin + i] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = buf!(*w) {
                    for r in 0..rows {
                        let gr = &g[r * cout..(r + 1) * cout];
                        for i in 0..cin {
                            let xv = xd[r * cin + i];
                            for (d, &s) in gw[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                                *d += xv * s;
                            }
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for r in 0..rows {
                        for (d, &s) in gb.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let xs = self.shape(*x);
                let (h, w, ci) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*kernel)[3];
                let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                let (xd, kd) = (self.data(*x).to_vec(), self.data(*kernel).to_vec());
                let taps = |oy: usize, ox: usize| {
                    (0..9).filter_map(move |t| {
                        let (ky, kx) = (t / 3, t % 3);
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        in_grid(iy, ix, h, w).map(|site| (t, site))
                    })
                };
                if let Some(gx) = buf!(*x) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * co..][..co];
                            for (t, site) in taps(oy, ox) {
                                for c in 0..ci {
                                    let kr = &kd[(t * ci + c) * co..][..co];
                                    gx[site * ci + c] +=
                                        go.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = buf!(*kernel) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &g[(oy * wo + ox) * co..][..co];
                            for (t, site) in taps(oy, ox) {
                                for c in 0..ci {
                                    let xv = xd[site * ci + c];
                                    for (d, &s) in gk[(t * ci + c) * co..][..co].iter_mut().zip(go) {
                                        *d += xv * s;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = buf!(*bias) {
                    for chunk in g.chunks(co) {
                        for (d, &s) in gb.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mean(x, map, count) => {
                let inv = 1.0 / *count as f64;
                if let Some(gx) = buf!(*x) {
                    for (d, &o) in gx.iter_mut().zip(map) {
                        *d += g[o] * inv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Broadcast(x, map) => {
                if let Some(gx) = buf!(*x) {
                    map.iter().zip(g).for_each(|(&j, &s)| gx[j] += s);
                }
            }
            Op::Select0(x, index) => {
                let inner = g.len();
                if let Some(gx) = buf!(*x) {
                    gx[index * inner..(index + 1) * inner]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::Stack(parts) => {
                let inner = g.len() / parts.len();
                for (p, &v) in parts.iter().enumerate() {
                    if let Some(gv) = buf!(v) {
                        gv.iter_mut()
                            .zip(&g[p * inner..(p + 1) * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Narrow(x, start) => {
                let c = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                if let Some(gx) = buf!(*x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        for (j, &s) in row.iter().enumerate() {
                            gx[r * c + start + j] += s;
                        }
                    }
                }
            }
            Op::Resize(x) => {
                let xs = self.shape(*x);
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let os = node.value.shape();
                let (oh, ow) = (os[0], os[1]);
                let sy = resize_stencil(h, oh);
                let sx = resize_stencil(w, ow);
                if let Some(gx) = buf!(*x) {
                    for (oy, &(y0, y1, wy)) in sy.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in sx.iter().enumerate() {
                            let go = &g[(oy * ow + ox) * c..][..c];
                            for (yy, xx, wt) in [
                                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                                (y0, x1, (1.0 - wy) * wx),
                                (y1, x0, wy * (1.0 - wx)),
                                (y1, x1, wy * wx),
                            ] {
                                let dst = &mut gx[(yy * w + xx) * c..][..c];
                                dst.iter_mut().zip(go).for_each(|(d, &s)| *d += wt * s);
                            }
                        }
                    }
                }
            }
            Op::Sample(x, coords) => {
                let xs = self.shape(*x);
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let cd = self.data(*coords).to_vec();
                let xd = self.data(*x).to_vec();
                let n = cd.len() / 2;
                if let Some(gx) = buf!(*x) {
                    for i in 0..n {
                        let taps = Taps::new(cd[2 * i], cd[2 * i + 1]);
                        let gi = &g[i * c..(i + 1) * c];
                        for (yy, xx, wt) in taps.corners() {
                            if let Some(site) = in_grid(yy, xx, h, w) {
                                let dst = &mut gx[site * c..(site + 1) * c];
                                dst.iter_mut().zip(gi).for_each(|(d, &s)| *d += wt * s);
                            }
                        }
                    }
                }
                if let Some(gc) = buf!(*coords) {
                    for i in 0..n {
                        let taps = Taps::new(cd[2 * i], cd[2 * i + 1]);
                        let gi = &g[i * c..(i + 1) * c];
                        let (dy, dx) = coord_grad(&xd, h, w, c, &taps, gi);
                        gc[2 * i] += dy;
                        gc[2 * i + 1] += dx;
                    }
                }
            }
            Op::DeformSample {
                features,
                offsets,
                base,
            } => {
                let fs = self.shape(*features);
                let (l, h, w, c) = (fs[0], fs[1], fs[2], fs[3]);
                let k = base.len();
                let plane = h * w * c;
                let od = self.data(*offsets).to_vec();
                let fd = self.data(*features).to_vec();
                let loc = |p: usize, y: usize, x: usize, ki: usize| {
                    let (by, bx) = base[ki];
                    Taps::new(
                        (y as isize + by) as f64 + od[p * 2 * k + 2 * ki],
                        (x as isize + bx) as f64 + od[p * 2 * k + 2 * ki + 1],
                    )
                };
                if let Some(gf) = buf!(*features) {
                    for li in 0..l {
                        let gmap = &mut gf[li * plane..(li + 1) * plane];
                        for ki in 0..k {
                            let src = &g[(li * k + ki) * plane..][..plane];
                            for y in 0..h {
                                for x in 0..w {
                                    let p = y * w + x;
                                    let taps = loc(p, y, x, ki);
                                    let gp = &src[p * c..(p + 1) * c];
                                    for (yy, xx, wt) in taps.corners() {
                                        if let Some(site) = in_grid(yy, xx, h, w) {
                                            gmap[site * c..(site + 1) * c]
                                                .iter_mut()
                                                .zip(gp)
                                                .for_each(|(d, &s)| *d += wt * s);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(go) = buf!(*offsets) {
                    for li in 0..l {
                        let map = &fd[li * plane..(li + 1) * plane];
                        for ki in 0..k {
                            let src = &g[(li * k + ki) * plane..][..plane];
                            for y in 0..h {
                                for x in 0..w {
                                    let p = y * w + x;
                                    let taps = loc(p, y, x, ki);
                                    let (dy, dx) =
                                        coord_grad(map, h, w, c, &taps, &src[p * c..(p + 1) * c]);
                                    go[p * 2 * k + 2 * ki] += dy;
                                    go[p * 2 * k + 2 * ki + 1] += dx;
                                }
                            }
                        }
                    }
                }
            }
            Op::ModAggregate {
                samples,
                modulation,
                kernels,
                mode,
            } => {
                let ss = self.shape(*samples);
                let (l, k, h, w, c) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
                let s = h * w;
                let inv = 1.0 / l as f64;
                let sd = self.data(*samples).to_vec();
                let md = self.data(*modulation).to_vec();
                let kd = self.data(*kernels).to_vec();
                let mut gs = vec![0.0; sd.len()];
                let mut gm = vec![0.0; md.len()];
                let mut gk = vec![0.0; kd.len()];
                match mode {
                    KernelMode::Depthwise => {
                        for li in 0..l {
                            for ki in 0..k {
                                let wk = kd[li * k + ki];
                                let base = (li * k + ki) * s * c;
                                for p in 0..s {
                                    let m = md[p * k + ki];
                                    let gp = &g[p * c..(p + 1) * c];
                                    let sp = &sd[base + p * c..][..c];
                                    let dot: f64 = gp.iter().zip(sp).map(|(a, b)| a * b).sum();
                                    gm[p * k + ki] += wk * inv * dot;
                                    gk[li * k + ki] += m * inv * dot;
                                    let coef = wk * m * inv;
                                    gs[base + p * c..][..c]
                                        .iter_mut()
                                        .zip(gp)
                                        .for_each(|(d, &v)| *d += coef * v);
                                }
                            }
                        }
                    }
                    KernelMode::ChannelMixing => {
                        let mut gt = vec![0.0; c];
                        for li in 0..l {
                            for ki in 0..k {
                                let wbase = (li * k + ki) * c * c;
                                let base = (li * k + ki) * s * c;
                                for p in 0..s {
                                    let m = md[p * k + ki];
                                    let gp = &g[p * c..(p + 1) * c];
                                    let sp = &sd[base + p * c..][..c];
                                    for ci in 0..c {
                                        let wr = &kd[wbase + ci * c..][..c];
                                        gt[ci] =
                                            inv * gp.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                                        let tv = m * sp[ci] * inv;
                                        for (d, &gv) in
                                            gk[wbase + ci * c..][..c].iter_mut().zip(gp)
                                        {
                                            *d += tv * gv;
                                        }
                                    }
                                    gm[p * k + ki] +=
                                        gt.iter().zip(sp).map(|(a, b)| a * b).sum::<f64>();
                                    gs[base + p * c..][..c]
                                        .iter_mut()
                                        .zip(&gt)
                                        .for_each(|(d, &v)| *d += m * v);
                                }
                            }
                        }
                    }
                }
                for (v, local) in [(*samples, gs), (*modulation, gm), (*kernels, gk)] {
                    if let Some(dst) = buf!(v) {
                        dst.iter_mut().zip(&local).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Standardize(x, eps) => {
                let xd = self.data(*x);
                let n = xd.len() as f64;
                let mean = xd.iter().map(|v| v / n).sum::<f64>();
                let var = xd.iter().map(|v| (v - mean) * (v - mean) / n).sum::<f64>();
                let inv_std = 1.0 / (var + eps).sqrt();
                let g_mean = g.iter().sum::<f64>() / n;
                let gy_mean = g.iter().zip(out).map(|(a, b)| a * b).sum::<f64>() / n;
                if let Some(gx) = buf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += inv_std * (g[k] - g_mean - out[k] * gy_mean);
                    }
                }
            }
            Op::AvgPool(x, factor) => {
                let xs = self.shape(*x);
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let wo = w / factor;
                let inv = 1.0 / (factor * factor) as f64;
                if let Some(gx) = buf!(*x) {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = ((y / factor) * wo + xx / factor) * c;
                            for ch in 0..c {
                                gx[(y * w + xx) * c + ch] += g[o + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let xd = self.data(*logits);
                if let Some(gx) = buf!(*logits) {
                    for k in 0..xd.len() {
                        let x = xd[k];
                        let t = targets[k];
                        let p = sigmoid(x);
                        let q = 1.0 - p;
                        let (log_p, log_q) = (-softplus(-x), -softplus(x));
                        let pos = alpha * q.powf(*gamma) * (gamma * p * log_p - q);
                        let neg = (1.0 - alpha) * p.powf(*gamma) * (p - gamma * q * log_q);
                        gx[k] += g[0] * (t * pos + (1.0 - t) * neg);
                    }
                }
            }
            Op::BceKl {
                logits,
                targets,
                mask,
            } => {
                let xd = self.data(*logits);
                if let Some(gx) = buf!(*logits) {
                    for k in 0..xd.len() {
                        gx[k] += g[0] * mask[k] * (sigmoid(xd[k]) - targets[k]);
                    }
                }
            }
            Op::L1 { pred, targets, mask } => {
                let pd = self.data(*pred);
                if let Some(gp) = buf!(*pred) {
                    for k in 0..pd.len() {
                        let d = pd[k] - targets[k];
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp[k] += g[0] * mask[k] * sign;
                    }
                }
            }
        }
    }
}

/// Gradient of `<upstream, sample(map, taps)>` with respect to the sample
/// location.
fn coord_grad(map: &[f64], h: usize, w: usize, c: usize, taps: &Taps, upstream: &[f64]) -> (f64, f64) {
    let mut dy = 0.0;
    let mut dx = 0.0;
    for ((yy, xx, _), (sy, sx)) in taps.corners().into_iter().zip(taps.corner_slopes()) {
        if let Some(site) = in_grid(yy, xx, h, w) {
            let dot: f64 = map[site * c..(site + 1) * c]
                .iter()
                .zip(upstream)
                .map(|(a, b)| a * b)
                .sum();
            dy += sy * dot;
            dx += sx * dot;
        }
    }
    (dy, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hard_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 1.0]));
        let y = tape.hard_sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let r = tape.max(x, zero).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn broadcast_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let w0 = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.linear(x, w0, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.linear(x, bad, b).is_err());
    }

    #[test]
    fn conv_identity_kernel_and_overlap_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[7.0]));
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.data_mut()[4] = 1.0;
        let k = tape.constant(k);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d_3x3(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);

        let ones = tape.constant(Tensor::full(&[3, 3, 1], 1.0));
        let kones = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d_3x3(ones, kones, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[1, 1, 0]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at(&[r, c, 0]), 4.0);
        }
    }

    #[test]
    fn mean_values_and_empty_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let m = tape.mean(x, &[0]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        assert!(tape.mean(x, &[]).is_err());
        let c = tape.constant(Tensor::full(&[2, 3, 4], 1.5));
        for axes in [&[0][..], &[1, 2], &[0, 1, 2]] {
            let m = tape.mean(c, axes).unwrap();
            assert!(tape.value(m).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        }
    }

    #[test]
    fn backward_linear_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.3, -0.2, 0.9]));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let unused = tape.leaf(t(&[2], &[5.0, 6.0]));
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn max_ties_pick_first() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let m = tape.max(a, b).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0]);
    }

    #[test]
    fn kink_conventions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 1.0, -1.0]));
        let r = tape.relu(x);
        let h = tape.hard_sigmoid(x);
        let s1 = tape.sum(r);
        let s2 = tape.sum(h);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        // relu'(0) = 0, hard_sigmoid'(+-1) = 0
        assert_eq!(grads.get(x).unwrap(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn base_offsets_grid() {
        assert_eq!(base_offsets(1).unwrap(), vec![(0, 0)]);
        let nine = base_offsets(9).unwrap();
        assert_eq!(nine.len(), 9);
        assert_eq!(nine[0], (-1, -1));
        assert_eq!(nine[4], (0, 0));
        assert!(base_offsets(4).is_err());
    }

    #[test]
    fn f32_tape_rounds() {
        let mut tape = Tape::with_dtype(DType::F32);
        let x = tape.constant(t(&[1], &[0.1]));
        let y = tape.affine(x, 3.0, 0.0);
        assert_eq!(tape.value(y).data()[0], (3.0 * (0.1f32 as f64)) as f32 as f64);
        assert_eq!(tape.value(y).dtype(), DType::F32);
    }

    #[test]
    fn losses_vanish_at_perfect_prediction() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[2], &[40.0, -40.0]));
        let focal = tape
            .sigmoid_focal_loss(logits, vec![1.0, 0.0], 0.25, 2.0)
            .unwrap();
        assert!(tape.value(focal).item().unwrap() < 1e-12);
        let ctr = tape.leaf(t(&[1], &[0.0]));
        let kl = tape.bce_kl_loss(ctr, vec![0.5], vec![1.0]).unwrap();
        assert!(tape.value(kl).item().unwrap().abs() < 1e-15);
        let pred = tape.leaf(t(&[2], &[1.0, 2.0]));
        let l1 = tape.l1_loss(pred, vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), 0.0);
    }
}
