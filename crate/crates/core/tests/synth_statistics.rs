//! Generated depth statistics against their analytic distributions.

use dcfmix_core::depth_stats::{
    class_depth_histogram, total_variation, BinScale, ClassDepthHistogram, DepthBinning,
};
use dcfmix_core::scene::Role;
use dcfmix_core::synth::{expected_histogram, generate, SceneSpec};

fn binning() -> DepthBinning {
    DepthBinning::new(64, 80.0, BinScale::Linear).unwrap()
}

fn measured(spec: &SceneSpec, role: Role, n: usize) -> ClassDepthHistogram {
    let b = binning();
    let mut acc = ClassDepthHistogram::empty(spec.classes.len(), &b);
    for s in generate(spec, role, n).unwrap() {
        acc.merge(&class_depth_histogram(s.labels(), s.depth(), &b).unwrap())
            .unwrap();
    }
    acc
}

/// One frame of a single class filling a 1000×1000 canvas.
fn million_pixels(spec: &SceneSpec, class: usize) -> SceneSpec {
    let mut single = spec.clone();
    single.width = 1000;
    single.height = 1000;
    single.classes = vec![spec.classes[class].clone()];
    single.classes[0].share = 1.0;
    single.classes[0].kind = dcfmix_core::synth::ClassKind::Stuff;
    single
}

#[test]
fn million_pixel_histograms_converge() {
    let spec = SceneSpec::two_domain();
    for class in 0..spec.classes.len() {
        for role in [Role::Source, Role::Target] {
            let single = million_pixels(&spec, class);
            let got = measured(&single, role, 1);
            assert_eq!(got.support(0), 1_000_000);
            let want = expected_histogram(&single, role, &binning());
            let tv = total_variation(got.densities(0), want.densities(0));
            assert!(
                tv < 0.01,
                "{} ({role:?}): tv {tv}",
                spec.classes[class].name
            );
        }
    }
}

#[test]
fn target_offset_moves_the_class_mean() {
    let mut spec = SceneSpec::two_domain();
    let building = spec.class_index("building").unwrap();
    spec.classes[building].depth.mean = 20.0;
    spec.classes[building].depth.lo = 17.0;
    spec.classes[building].depth.hi = 23.0;
    spec.classes[building].depth.std = 1.0;
    let src = measured(&spec, Role::Source, 20)
        .mean_depth(building)
        .unwrap();
    let tgt = measured(&spec, Role::Target, 20)
        .mean_depth(building)
        .unwrap();
    assert!(((tgt - src) - 30.0).abs() <= 80.0 / 64.0, "{src} -> {tgt}");
}

#[test]
fn labels_and_depths_agree() {
    let spec = SceneSpec::two_domain();
    for role in [Role::Source, Role::Target] {
        for s in generate(&spec, role, 5).unwrap() {
            for (&l, &d) in s.labels().data().iter().zip(s.depth().data()) {
                if l == dcfmix_core::scene::IGNORE {
                    assert_eq!(d, 0.0);
                    continue;
                }
                let c = &spec.classes[l as usize];
                let offset = if role == Role::Target {
                    c.target_offset
                } else {
                    0.0
                };
                assert!(d >= c.depth.lo + offset - 1e-3 && d <= c.depth.hi + offset + 1e-3);
            }
        }
    }
}
