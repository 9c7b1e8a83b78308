//! Depth histograms against a brute-force pixel count.

use dcfmix_core::depth_stats::{class_depth_histogram, BinScale, DepthBinning};
use dcfmix_core::scene::{DepthMap, LabelMap, IGNORE};
use proptest::prelude::*;

mod common;
use common::histogram_oracle as oracle;

fn scene() -> impl Strategy<Value = (usize, usize, usize, Vec<u8>, Vec<f64>)> {
    (1usize..=32, 1usize..=32, 1usize..=8).prop_flat_map(|(w, h, c)| {
        let label = prop_oneof![9 => 0..c as u8, 1 => Just(IGNORE)];
        let depth = prop_oneof![
            1 => Just(0.0),
            1 => (0u32..=12).prop_map(|k| k as f64 * 10.0),
            8 => 0.0f64..120.0,
        ];
        (
            Just(w),
            Just(h),
            Just(c),
            prop::collection::vec(label, w * h),
            prop::collection::vec(depth, w * h),
        )
    })
}

fn binning() -> impl Strategy<Value = DepthBinning> {
    prop_oneof![
        (1usize..=70, 1.0f64..100.0)
            .prop_map(|(n, d)| DepthBinning::new(n, d, BinScale::Linear).unwrap()),
        (1usize..=70, 1.0f64..100.0)
            .prop_map(|(n, d)| DepthBinning::new(n, d, BinScale::Log).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn densities_match_pixel_count((w, h, c, labels, depth) in scene(), b in binning()) {
        let lm = LabelMap::new(w, h, c, labels.clone()).unwrap();
        let dm = DepthMap::new(w, h, depth.clone()).unwrap();
        let hist = class_depth_histogram(&lm, &dm, &b).unwrap();
        let expected = oracle(&labels, &depth, c, b.edges());
        for (class, row) in expected.iter().enumerate() {
            prop_assert_eq!(hist.densities(class), row.as_slice());
            let sum: f64 = row.iter().sum();
            if hist.support(class) > 0 {
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn bin_index_is_monotone(b in binning(), mut depths in prop::collection::vec(0.0f64..150.0, 2..50)) {
        depths.sort_by(f64::total_cmp);
        let bins: Vec<_> = depths.iter().filter(|&&d| d > 0.0).map(|&d| b.bin_of(d).unwrap()).collect();
        prop_assert!(bins.windows(2).all(|p| p[0] <= p[1]));
    }
}

#[test]
fn two_class_example() {
    let b = DepthBinning::from_edges(vec![0.0, 3.0, 10.0]).unwrap();
    let l = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
    let d = DepthMap::new(2, 2, vec![1.0, 1.0, 5.0, 5.0]).unwrap();
    let h = class_depth_histogram(&l, &d, &b).unwrap();
    assert_eq!(h.densities(0), &[1.0, 0.0]);
    assert_eq!(h.densities(1), &[0.0, 1.0]);

    let l = LabelMap::new(2, 2, 1, vec![0; 4]).unwrap();
    let d = DepthMap::new(2, 2, vec![1.0, 5.0, 1.0, 5.0]).unwrap();
    assert_eq!(
        class_depth_histogram(&l, &d, &b).unwrap().densities(0),
        &[0.5, 0.5]
    );
}
