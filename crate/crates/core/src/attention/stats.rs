use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Left edges of the ratio histogram bins; the last bin is open-ended.
pub const RATIO_BIN_EDGES: [f64; 20] = [
    0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7,
    1.8, 1.9,
];

/// Denominators below this are not divided by.
pub const MIN_REFERENCE_WEIGHT: f64 = 1e-8;

/// Histogram of level-weight ratios `w[level] / w[reference]`, where the
/// reference is the lowest-resolution (last) level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleRatioHistogram {
    pub levels: usize,
    /// `counts[level][bin]`.
    pub counts: Vec<Vec<u64>>,
    /// Ratios kept per level.
    pub retained: Vec<u64>,
    /// Ratios skipped because the reference weight was below
    /// [`MIN_REFERENCE_WEIGHT`].
    pub dropped: u64,
}

fn bin_of(ratio: f64) -> usize {
    RATIO_BIN_EDGES
        .iter()
        .rposition(|&e| ratio >= e)
        .unwrap_or(0)
}

pub fn scale_ratio_stats(weights_per_image: &[Tensor]) -> Result<ScaleRatioHistogram> {
    let levels = weights_per_image.first().map_or(0, Tensor::len);
    let mut counts = vec![vec![0u64; RATIO_BIN_EDGES.len()]; levels];
    let mut retained = vec![0u64; levels];
    let mut dropped = 0u64;
    for w in weights_per_image {
        if w.len() != levels || levels == 0 {
            return Err(Error::invalid(format!(
                "scale weights of shape {:?}, expected [{levels}]",
                w.shape()
            )));
        }
        let reference = w.data()[levels - 1];
        if reference.abs() < MIN_REFERENCE_WEIGHT {
            dropped += levels as u64;
            continue;
        }
        for (l, &v) in w.data().iter().enumerate() {
            counts[l][bin_of(v / reference)] += 1;
            retained[l] += 1;
        }
    }
    Ok(ScaleRatioHistogram {
        levels,
        counts,
        retained,
        dropped,
    })
}

impl ScaleRatioHistogram {
    /// One row per bin: `bin_lo,bin_hi,level_0,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi");
        for l in 0..self.levels {
            out.push_str(&format!(",level_{l}"));
        }
        out.push('\n');
        for (b, &lo) in RATIO_BIN_EDGES.iter().enumerate() {
            let hi = RATIO_BIN_EDGES
                .get(b + 1)
                .map_or_else(|| "inf".to_string(), |h| format!("{h:.1}"));
            out.push_str(&format!("{lo:.1},{hi}"));
            for l in 0..self.levels {
                out.push_str(&format!(",{}", self.counts[l][b]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn equal_weights_give_unit_ratios() {
        let h = scale_ratio_stats(&[w(&[0.4, 0.4, 0.4]), w(&[0.9, 0.9, 0.9])]).unwrap();
        let one = bin_of(1.0);
        for l in 0..3 {
            assert_eq!(h.counts[l][one], 2);
        }
    }

    #[test]
    fn ratio_two() {
        let h = scale_ratio_stats(&[w(&[1.0, 0.5])]).unwrap();
        assert_eq!(h.counts[0][bin_of(2.0)], 1);
        assert_eq!(bin_of(2.0), RATIO_BIN_EDGES.len() - 1);
    }

    #[test]
    fn counts_conserve_and_drops_are_counted() {
        let data = [w(&[0.3, 0.6]), w(&[0.2, 0.0]), w(&[1.0, 0.1]), w(&[0.0, 0.5])];
        let h = scale_ratio_stats(&data).unwrap();
        assert_eq!(h.dropped, 2);
        for l in 0..2 {
            assert_eq!(h.counts[l].iter().sum::<u64>(), h.retained[l]);
            assert_eq!(h.retained[l], 3);
        }
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 1 + RATIO_BIN_EDGES.len());
    }
}
