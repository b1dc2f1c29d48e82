mod common;

use atlasseg::em::{em_fit, init_params, EmSettings};
use atlasseg::segment::{dice, dice_per_label, posterior_warped, segment_warped};
use atlasseg::LabelMap;
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn segmentation_is_the_posterior_argmax(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let shape = grid(&[9, 7]);
        let groups = [0, 1, 1];
        let atlas = random_atlas(&mut r, &shape, &groups);
        let img = random_image(&mut r, &shape, 0.0, 10.0);
        let params = random_params(&mut r, &groups);
        let s = segment_warped(&img, &atlas, &params).unwrap();
        let post = posterior_warped(&img, &atlas, &params).unwrap();
        let n = shape.num_voxels();
        for j in 0..n {
            let col: Vec<f64> = (0..3).map(|l| post[l * n + j]).collect();
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let best = col.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(col[s.labels()[j] as usize] >= best - 1e-12);
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in 0u64..10_000, l in 2usize..5) {
        let mut r = rng(seed);
        let shape = grid(&[6, 6]);
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            use rand::Rng;
            LabelMap::new(shape.clone(), l, (0..36).map(|_| r.gen_range(0..l as u32)).collect()).unwrap()
        };
        let (a, b) = (draw(&mut r), draw(&mut r));
        for k in 0..l as u32 {
            let ab = dice(&a, &b, k).unwrap();
            prop_assert_eq!(ab, dice(&b, &a, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice(&a, &a, k).unwrap(), 1.0);
        }
        prop_assert_eq!(dice_per_label(&a, &b).unwrap().len(), l);
    }

    #[test]
    fn em_segmentation_ignores_affine_contrast(seed in 0u64..200, a in 0.25f64..4.0, b in -50.0f64..50.0) {
        let (img, atlas) = em_instance(seed);
        let fit = |img: &atlasseg::Volume| {
            let (lo, hi) = img.range();
            let floor = 1e-6 * ((hi - lo) as f64).powi(2);
            let init = init_params(img, &atlas, floor).unwrap();
            let st = em_fit(img, &atlas, &init, &EmSettings { var_floor: floor, ..EmSettings::default() }).unwrap();
            segment_warped(img, &atlas, &st.params).unwrap()
        };
        let base = fit(&img);
        let moved = fit(&img.affine(a, b).unwrap());
        prop_assert_eq!(base.labels(), moved.labels());
    }
}
