//! Bilinear interpolation kernels on `[H, W, C]` feature maps.
//!
//! Integer coordinates address stored values. Sites outside the grid read as
//! zero.

use super::Tensor;
use crate::error::{Error, Result};

/// The four neighbouring sites of a fractional location and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub y0: isize,
    pub x0: isize,
    pub wy: f64,
    pub wx: f64,
}

impl Taps {
    pub fn new(py: f64, px: f64) -> Self {
        // Far-away coordinates are pinned so the corner indices cannot
        // overflow; every corner is off the grid either way.
        const FAR: f64 = 1e15;
        let fy = py.floor().clamp(-FAR, FAR);
        let fx = px.floor().clamp(-FAR, FAR);
        Taps {
            y0: fy as isize,
            x0: fx as isize,
            wy: (py - fy).clamp(0.0, 1.0),
            wx: (px - fx).clamp(0.0, 1.0),
        }
    }

    /// `(row, col, weight)` for the four corners, in-grid or not.
    #[inline]
    pub fn corners(&self) -> [(isize, isize, f64); 4] {
        let (wy, wx) = (self.wy, self.wx);
        [
            (self.y0, self.x0, (1.0 - wy) * (1.0 - wx)),
            (self.y0, self.x0 + 1, (1.0 - wy) * wx),
            (self.y0 + 1, self.x0, wy * (1.0 - wx)),
            (self.y0 + 1, self.x0 + 1, wy * wx),
        ]
    }

    /// Partial derivatives of each corner weight with respect to `(py, px)`.
    #[inline]
    pub fn corner_slopes(&self) -> [(f64, f64); 4] {
        let (wy, wx) = (self.wy, self.wx);
        [
            (-(1.0 - wx), -(1.0 - wy)),
            (-wx, 1.0 - wy),
            (1.0 - wx, -wy),
            (wx, wy),
        ]
    }
}

#[inline]
pub(crate) fn in_grid(y: isize, x: isize, h: usize, w: usize) -> Option<usize> {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        Some(y as usize * w + x as usize)
    } else {
        None
    }
}

/// Accumulates `scale * sample(map, py, px)` into `out` (length C).
/// `map` is a flat `[h, w, c]` slice.
#[inline]
pub(crate) fn sample_into(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    taps: &Taps,
    scale: f64,
    out: &mut [f64],
) {
    for (y, x, wt) in taps.corners() {
        if let Some(site) = in_grid(y, x, h, w) {
            let k = scale * wt;
            let row = &map[site * c..(site + 1) * c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += k * v;
            }
        }
    }
}

/// Bilinear sample of an `[H, W, C]` map at `(py, px)` with zero padding.
pub fn bilinear_sample(x: &Tensor, py: f64, px: f64) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::invalid(format!(
            "bilinear_sample expects [H, W, C], got {:?}",
            x.shape()
        )));
    }
    if !py.is_finite() || !px.is_finite() {
        return Err(Error::NonFinite(format!(
            "sample coordinate ({py}, {px})"
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c];
    sample_into(x.data(), h, w, c, &Taps::new(py, px), 1.0, &mut out);
    Tensor::new(&[c], out)
}

/// Source coordinate of a target pixel when resizing `src` pixels to `dst`
/// pixels (pixel centres mapped proportionally, clamped into the source).
#[inline]
pub(crate) fn resize_coord(dst_index: usize, src: usize, dst: usize) -> f64 {
    let s = (dst_index as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
    s.clamp(0.0, (src - 1) as f64)
}

/// Interpolation stencil along one axis for a resize: `(i0, i1, w1)` per
/// target index, with `i1` clamped to the last source index.
pub(crate) fn resize_stencil(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let s = resize_coord(i, src, dst);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
