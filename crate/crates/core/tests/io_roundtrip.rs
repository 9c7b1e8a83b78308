//! Samples and manifests survive a trip through PNG files unchanged.

use dcfmix_core::scene::{
    load_sample, save_sample, CorpusManifest, DepthMap, Image, LabelMap, Role, SceneSample, IGNORE,
};
use proptest::prelude::*;

fn sample() -> impl Strategy<Value = SceneSample> {
    (1usize..=24, 1usize..=24, 1usize..=12, any::<u32>()).prop_flat_map(|(w, h, c, tag)| {
        let n = w * h;
        (
            prop::collection::vec(any::<u8>(), 3 * n),
            prop::collection::vec(prop_oneof![9 => 0..c as u8, 1 => Just(IGNORE)], n),
            prop::collection::vec(0u16..=u16::MAX, n),
        )
            .prop_map(move |(img, labels, mm)| {
                SceneSample::new(
                    format!("frame_{tag}"),
                    Image::new(w, h, img).unwrap(),
                    LabelMap::new(w, h, c, labels).unwrap(),
                    DepthMap::new(w, h, mm.iter().map(|&v| f64::from(v) / 1000.0).collect())
                        .unwrap(),
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn save_then_load_is_bit_exact(s in sample()) {
        let dir = tempfile::tempdir().unwrap();
        let entry = save_sample(&s, dir.path()).unwrap();
        let back = load_sample(&entry, s.labels().classes()).unwrap();
        prop_assert_eq!(back.image(), s.image());
        prop_assert_eq!(back.labels(), s.labels());
        let same_bits = back.depth().data().iter().zip(s.depth().data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(back.id(), s.id());
    }
}

#[test]
fn manifest_round_trip_loads_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = ["road", "sky", "car"].map(String::from).to_vec();
    let mut manifest = CorpusManifest::new(Role::Target, names.clone());
    let mut samples = Vec::new();
    for i in 0..3u8 {
        let s = SceneSample::new(
            format!("t{i}"),
            Image::filled(3, 2, [i, 2 * i, 9]),
            LabelMap::filled(3, 2, 3, i).unwrap(),
            DepthMap::filled(3, 2, 1.5 + f64::from(i)).unwrap(),
        )
        .unwrap();
        manifest.entries.push(save_sample(&s, dir.path()).unwrap());
        samples.push(s);
    }
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    let loaded = CorpusManifest::load(&path).unwrap();
    assert_eq!(loaded.role, Role::Target);
    assert_eq!(loaded.class_names, names);
    assert_eq!(loaded.load_all().unwrap(), samples);
}
