mod common;

use common::*;
use dyhead::pyramid::{align_pyramid, AlignedPyramid, FeaturePyramid};
use dyhead::tensor::gradcheck::{gradcheck, GradcheckConfig};
use dyhead::{Tape, Tensor};

#[test]
fn upsampled_level_matches_site_oracle() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let small = rand_tensor(&mut r, &[2, 2, 3]);
        let levels = vec![rand_tensor(&mut r, &[8, 8, 3]), rand_tensor(&mut r, &[4, 4, 3]), small.clone()];
        let p = FeaturePyramid::new(levels.clone(), vec![1, 2, 4]).unwrap();
        let a = AlignedPyramid::from_pyramid(&p).unwrap();
        assert_close(&a.data.select0(2), &resize_oracle(&small, 4, 4), 1e-12, "upsample");
        assert_close(&a.data.select0(0), &resize_oracle(&levels[0], 4, 4), 1e-12, "downsample");
        assert_eq!(a.data.select0(1).data(), levels[1].data());
    }
}

#[test]
fn even_level_count_uses_lower_median() {
    let levels = vec![
        Tensor::zeros(&[8, 6, 2]),
        Tensor::zeros(&[4, 3, 2]),
        Tensor::zeros(&[2, 2, 2]),
        Tensor::zeros(&[1, 1, 2]),
    ];
    let a = AlignedPyramid::from_pyramid(&FeaturePyramid::new(levels, vec![1, 2, 4, 8]).unwrap()).unwrap();
    assert_eq!(a.median_index, 1);
    assert_eq!(a.data.shape(), &[4, 4, 3, 2]);
}

#[test]
fn alignment_gradcheck() {
    let mut r = rng(4);
    let inputs = vec![
        rand_tensor(&mut r, &[6, 6, 2]),
        rand_tensor(&mut r, &[3, 3, 2]),
        rand_tensor(&mut r, &[2, 1, 2]),
    ];
    let rep = gradcheck(|t: &mut Tape, v| align_pyramid(t, v), &inputs, &GradcheckConfig::default()).unwrap();
    assert!(rep.passed(), "{:e}", rep.max_rel_error);
}
