//! Multi-level feature pyramids and their alignment to the median level's
//! resolution, giving the `[L, H, W, C]` tensor the attentions operate on.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of the level every other level is resampled to: the lower median,
/// i.e. the higher-resolution side when `levels` is even.
pub fn median_level(levels: usize) -> Result<usize> {
    if levels == 0 {
        return Err(Error::invalid("a pyramid needs at least one level"));
    }
    Ok((levels - 1) / 2)
}

/// Backbone feature maps, index 0 being the highest resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, strides: Vec<usize>) -> Result<Self> {
        check_levels(levels.iter().map(Tensor::shape))?;
        if strides.len() != levels.len() {
            return Err(Error::invalid(format!(
                "{} levels but {} strides",
                levels.len(),
                strides.len()
            )));
        }
        Ok(FeaturePyramid { levels, strides })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }
}

/// Pyramid levels resampled to a common `H x W`, stacked as `[L, H, W, C]`.
#[derive(Clone, Debug)]
pub struct AlignedPyramid {
    pub data: Tensor,
    pub median_index: usize,
}

impl AlignedPyramid {
    pub fn from_pyramid(p: &FeaturePyramid) -> Result<Self> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let out = align_pyramid(&mut tape, &vars)?;
        Ok(AlignedPyramid {
            data: tape.value(out).clone(),
            median_index: median_level(p.num_levels())?,
        })
    }

    pub fn levels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// `H * W`.
    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    /// The same data viewed as `[L, S, C]`.
    pub fn as_lsc(&self) -> Tensor {
        let (l, s, c) = (self.levels(), self.positions(), self.channels());
        self.data.clone().reshape(&[l, s, c]).expect("lossless view")
    }
}

fn check_levels<'a>(shapes: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let shapes: Vec<&[usize]> = shapes.collect();
    median_level(shapes.len())?;
    for s in &shapes {
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid(format!("pyramid level shape {s:?} is not [H, W, C]")));
        }
    }
    let c = shapes[0][2];
    for s in &shapes[1..] {
        if s[2] != c {
            return Err(Error::Shape {
                lhs: shapes[0].to_vec(),
                rhs: s.to_vec(),
                context: "pyramid channel count",
            });
        }
    }
    for pair in shapes.windows(2) {
        if pair[1][0] >= pair[0][0] || pair[1][1] >= pair[0][1] {
            return Err(Error::invalid(format!(
                "pyramid resolution must strictly decrease: {:?} then {:?}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

/// Differentiable alignment: each `[H_i, W_i, C]` level is bilinearly
/// resampled to the median level's size and the results stacked to
/// `[L, H, W, C]`. The median level is passed through untouched.
pub fn align_pyramid(tape: &mut Tape, levels: &[Var]) -> Result<Var> {
    check_levels(levels.iter().map(|&v| tape.shape(v)))?;
    let m = median_level(levels.len())?;
    let target = tape.shape(levels[m]).to_vec();
    let mut resized = Vec::with_capacity(levels.len());
    for (i, &lv) in levels.iter().enumerate() {
        if i == m {
            resized.push(lv);
        } else {
            resized.push(tape.resize_bilinear(lv, target[0], target[1])?);
        }
    }
    tape.stack(&resized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_indices() {
        assert_eq!(median_level(5).unwrap(), 2);
        assert_eq!(median_level(1).unwrap(), 0);
        assert_eq!(median_level(4).unwrap(), 1);
        assert!(median_level(0).is_err());
    }

    #[test]
    fn single_level_gains_leading_axis() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let p = FeaturePyramid::new(vec![t.clone()], vec![1]).unwrap();
        let a = AlignedPyramid::from_pyramid(&p).unwrap();
        assert_eq!(a.data.shape(), &[1, 3, 2, 2]);
        assert_eq!(a.data.data(), t.data());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = FeaturePyramid::new(
            vec![Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[2, 2, 3])],
            vec![1, 2],
        );
        assert!(p.is_err());
    }

    #[test]
    fn resolution_must_decrease() {
        let p = FeaturePyramid::new(
            vec![Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 2])],
            vec![1, 1],
        );
        assert!(p.is_err());
    }

    #[test]
    fn constants_survive_alignment_and_median_is_exact() {
        let levels = vec![
            Tensor::full(&[8, 8, 2], 0.7),
            Tensor::from_fn(&[4, 4, 2], |i| (i as f64).sin()),
            Tensor::full(&[2, 2, 2], -1.3),
        ];
        let p = FeaturePyramid::new(levels.clone(), vec![1, 2, 4]).unwrap();
        let a = AlignedPyramid::from_pyramid(&p).unwrap();
        assert_eq!(a.median_index, 1);
        assert_eq!(a.data.shape(), &[3, 4, 4, 2]);
        assert!(a.data.select0(0).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(a.data.select0(1).data(), levels[1].data());
        assert!(a.data.select0(2).data().iter().all(|&v| (v + 1.3).abs() < 1e-15));
        assert_eq!(a.as_lsc().shape(), &[3, 16, 2]);
    }
}
