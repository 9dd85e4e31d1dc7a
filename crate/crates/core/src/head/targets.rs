use crate::error::{Error, Result};

/// Boxes `(x0, y0, x1, y1)` in image pixels with their class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// The aligned prediction grid: `levels` copies of an `height x width` grid
/// whose cells are `stride` image pixels wide.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

impl GridSpec {
    /// Image-pixel centre of cell `(y, x)`.
    pub fn center(&self, y: usize, x: usize) -> (f64, f64) {
        ((y as f64 + 0.5) * self.stride, (x as f64 + 0.5) * self.stride)
    }

    pub fn positions(&self) -> usize {
        self.levels * self.height * self.width
    }
}

/// Box max-side ranges in image pixels: level `i` takes `[2^(i+2), 2^(i+3))`,
/// with the first range open downwards and the last open upwards so every box
/// has a level.
pub fn default_level_ranges(levels: usize) -> Vec<(f64, f64)> {
    (0..levels)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { 2f64.powi(i as i32 + 2) };
            let hi = if i + 1 == levels {
                f64::INFINITY
            } else {
                2f64.powi(i as i32 + 3)
            };
            (lo, hi)
        })
        .collect()
}

/// Smallest distance kept in regression targets, in grid units.
const MIN_DISTANCE: f64 = 0.05;

/// Per-position training targets in `[L, H, W]` order.
#[derive(Clone, Debug)]
pub struct Targets {
    pub grid: GridSpec,
    pub num_classes: usize,
    /// Assigned class, if positive.
    pub class: Vec<Option<usize>>,
    /// 1.0 for positives.
    pub positive: Vec<f64>,
    /// Centerness in `[0, 1]`; 0 for negatives.
    pub centerness: Vec<f64>,
    /// `(l, t, r, b)` distances in grid units; 0 for negatives.
    pub box_targets: Vec<f64>,
    pub num_positive: usize,
    /// Degenerate boxes that were ignored.
    pub skipped: usize,
}

impl Targets {
    pub fn positions(&self) -> usize {
        self.grid.positions()
    }

    /// `[L, H, W, num_classes]` one-hot classification targets.
    pub fn class_onehot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.positions() * self.num_classes];
        for (i, c) in self.class.iter().enumerate() {
            if let Some(c) = c {
                out[i * self.num_classes + c] = 1.0;
            }
        }
        out
    }
}

fn centerness(d: [f64; 4]) -> f64 {
    let [l, t, r, b] = d;
    (l.min(r) / l.max(r) * t.min(b) / t.max(b)).sqrt()
}

/// Assigns each ground-truth box to the level whose range holds its longest
/// side, and marks the cells of that level whose centres lie strictly inside
/// the box. When a box contains no cell centre, the cell containing the box
/// centre is used instead. Cells claimed by several boxes take the smallest.
pub fn assign_targets(
    gt: &GroundTruth,
    grid: &GridSpec,
    level_ranges: &[(f64, f64)],
    num_classes: usize,
) -> Result<Targets> {
    if level_ranges.len() != grid.levels {
        return Err(Error::invalid(format!(
            "{} level ranges for {} levels",
            level_ranges.len(),
            grid.levels
        )));
    }
    if gt.boxes.len() != gt.classes.len() {
        return Err(Error::invalid(format!(
            "{} boxes but {} labels",
            gt.boxes.len(),
            gt.classes.len()
        )));
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!(
            "label {c} out of range for {num_classes} classes"
        )));
    }
    let n = grid.positions();
    let (h, w) = (grid.height, grid.width);
    let mut t = Targets {
        grid: *grid,
        num_classes,
        class: vec![None; n],
        positive: vec![0.0; n],
        centerness: vec![0.0; n],
        box_targets: vec![0.0; n * 4],
        num_positive: 0,
        skipped: 0,
    };
    let mut claimed_area = vec![f64::INFINITY; n];

    for (bi, b) in gt.boxes.iter().enumerate() {
        let [x0, y0, x1, y1] = *b;
        if !(x1 > x0 && y1 > y0) || b.iter().any(|v| !v.is_finite()) {
            t.skipped += 1;
            continue;
        }
        let side = (x1 - x0).max(y1 - y0);
        let Some(level) = level_ranges
            .iter()
            .position(|&(lo, hi)| side >= lo && side < hi)
        else {
            t.skipped += 1;
            continue;
        };
        let area = (x1 - x0) * (y1 - y0);
        let distances = |cy: f64, cx: f64| {
            [cx - x0, cy - y0, x1 - cx, y1 - cy].map(|d| d / grid.stride)
        };

        let mut cells = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = grid.center(y, x);
                if distances(cy, cx).iter().all(|&d| d > 0.0) {
                    cells.push((y, x));
                }
            }
        }
        if cells.is_empty() {
            let cy = ((y0 + y1) / 2.0 / grid.stride).floor().clamp(0.0, (h - 1) as f64);
            let cx = ((x0 + x1) / 2.0 / grid.stride).floor().clamp(0.0, (w - 1) as f64);
            cells.push((cy as usize, cx as usize));
        }

        for (y, x) in cells {
            let i = (level * h + y) * w + x;
            if area >= claimed_area[i] {
                continue;
            }
            claimed_area[i] = area;
            let (cy, cx) = grid.center(y, x);
            let d = distances(cy, cx).map(|v| v.max(MIN_DISTANCE));
            t.class[i] = Some(gt.classes[bi]);
            t.positive[i] = 1.0;
            t.centerness[i] = centerness(d);
            t.box_targets[i * 4..i * 4 + 4].copy_from_slice(&d);
        }
    }
    t.num_positive = t.positive.iter().filter(|&&p| p > 0.0).count();
    if t.skipped > 0 {
        log::warn!("skipped {} degenerate ground-truth boxes", t.skipped);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_everything() {
        let r = default_level_ranges(3);
        assert_eq!(r, vec![(0.0, 8.0), (8.0, 16.0), (16.0, f64::INFINITY)]);
    }

    #[test]
    fn centerness_at_centre_is_one() {
        assert_eq!(centerness([2.0, 3.0, 2.0, 3.0]), 1.0);
        assert!((centerness([1.0, 1.0, 3.0, 1.0]) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
