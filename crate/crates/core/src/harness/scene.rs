use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use crate::head::GroundTruth;
use crate::tensor::Tensor;

/// Shortest and longest rectangle side in pixels.
pub const MIN_SIDE: f64 = 6.0;
pub const MAX_SIDE: f64 = 48.0;
pub const MAX_RECTS: usize = 8;

/// Fill pattern of each class, by label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    /// Two-pixel horizontal bands.
    HStripes,
    /// Two-pixel vertical bands.
    VStripes,
    /// Two-pixel checkerboard.
    Checker,
}

impl Pattern {
    pub fn of_class(class: usize) -> Pattern {
        [Pattern::Solid, Pattern::HStripes, Pattern::VStripes, Pattern::Checker][class % 4]
    }

    fn on(self, y: usize, x: usize) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::HStripes => (y / 2) % 2 == 0,
            Pattern::VStripes => (x / 2) % 2 == 0,
            Pattern::Checker => (y / 2 + x / 2) % 2 == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[size, size, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt: GroundTruth,
    pub seed: u64,
}

/// Piecewise-constant background plus 1 to 8 non-overlapping axis-aligned
/// rectangles. The longest side of each rectangle is log-uniform in
/// `[MIN_SIDE, MAX_SIDE]`; every box has integer corners inside the image.
pub fn gen_scene(seed: u64, size: usize, num_classes: usize) -> SyntheticScene {
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut px = vec![0.0; size * size * 3];

    // Background: a grid of 1-3 x 1-3 flat tiles with random split points.
    let splits = |rng: &mut Pcg32| {
        let n = rng.random_range(1..=3usize);
        let mut cuts: Vec<usize> = (1..n).map(|_| rng.random_range(1..size)).collect();
        cuts.push(0);
        cuts.push(size);
        cuts.sort_unstable();
        cuts.dedup();
        cuts
    };
    let rows = splits(&mut rng);
    let cols = splits(&mut rng);
    for r in rows.windows(2) {
        for c in cols.windows(2) {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.6));
            for y in r[0]..r[1] {
                for x in c[0]..c[1] {
                    px[(y * size + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }

    let wanted = rng.random_range(1..=MAX_RECTS);
    let max_side = MAX_SIDE.min(size as f64);
    let mut placed: Vec<([usize; 4], usize)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < wanted && attempts < 200 {
        attempts += 1;
        let long = (rng.random_range(MIN_SIDE.ln()..=max_side.ln())).exp().round() as usize;
        let short = rng.random_range((long as f64 * 0.5).max(MIN_SIDE).round() as usize..=long);
        let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        let b = [x0, y0, x0 + w, y0 + h];
        // The first rectangle always fits; later ones must not touch others.
        let free = placed.iter().all(|(o, _)| {
            b[2] < o[0] || o[2] < b[0] || b[3] < o[1] || o[3] < b[1]
        });
        if !free {
            continue;
        }
        let class = rng.random_range(0..num_classes);
        let pattern = Pattern::of_class(class);
        let bright: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let dark: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.25));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let color = if pattern.on(y - y0, x - x0) { bright } else { dark };
                px[(y * size + x) * 3..][..3].copy_from_slice(&color);
            }
        }
        placed.push((b, class));
    }

    let gt = GroundTruth {
        boxes: placed.iter().map(|(b, _)| b.map(|v| v as f64)).collect(),
        classes: placed.iter().map(|&(_, c)| c).collect(),
    };
    SyntheticScene {
        image: Tensor::new(&[size, size, 3], px).expect("scene buffer matches its shape"),
        gt,
        seed,
    }
}
