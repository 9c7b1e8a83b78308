//! Class-based copy-paste mixing between a source and a target frame.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{DepthMap, Image, LabelMap, MixMask, SceneSample, IGNORE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub chosen: BTreeSet<u8>,
    pub seed: u64,
}

/// Picks ⌈m/2⌉ of the `m` classes present in `source_labels`, uniformly
/// without replacement and reproducibly for a given seed.
pub fn select_classes(source_labels: &LabelMap, seed: u64) -> Result<ClassSelection> {
    let present: Vec<u8> = source_labels.present_classes().into_iter().collect();
    if present.is_empty() {
        return Err(Error::EmptySource);
    }
    let take = present.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = present.choose_multiple(&mut rng, take).copied().collect();
    Ok(ClassSelection { chosen, seed })
}

/// Marks every source pixel whose label is in the selection.
pub fn build_mask(source_labels: &LabelMap, selection: &ClassSelection) -> MixMask {
    let data = source_labels
        .data()
        .iter()
        .map(|&l| l != IGNORE && selection.chosen.contains(&l))
        .collect();
    MixMask::new(source_labels.width(), source_labels.height(), data)
        .expect("mask built from label map dimensions")
}

/// Per-pixel select: source planes where the mask is set, target elsewhere.
/// The depth plane travels with the pasted pixels.
pub fn composite(
    source: &SceneSample,
    target: &SceneSample,
    mask: &MixMask,
) -> Result<SceneSample> {
    let dims = (target.width(), target.height());
    if (source.width(), source.height()) != dims || (mask.width(), mask.height()) != dims {
        return Err(Error::DimensionMismatch(format!(
            "source {}x{}, target {}x{}, mask {}x{}",
            source.width(),
            source.height(),
            target.width(),
            target.height(),
            mask.width(),
            mask.height()
        )));
    }
    let classes = source.labels().classes().max(target.labels().classes());
    let m = mask.data();

    let mut image = target.image().data().to_vec();
    for (i, px) in image.chunks_exact_mut(3).enumerate() {
        if m[i] {
            px.copy_from_slice(&source.image().data()[i * 3..i * 3 + 3]);
        }
    }
    let labels: Vec<u8> = select(m, source.labels().data(), target.labels().data());
    let depth: Vec<f64> = select(m, source.depth().data(), target.depth().data());

    SceneSample::new(
        format!("{}+{}", source.id(), target.id()),
        Image::new(dims.0, dims.1, image)?,
        LabelMap::new(dims.0, dims.1, classes, labels)?,
        DepthMap::new(dims.0, dims.1, depth)?,
    )
}

fn select<T: Copy>(mask: &[bool], source: &[T], target: &[T]) -> Vec<T> {
    mask.iter()
        .zip(source.iter().zip(target))
        .map(|(&m, (&s, &t))| if m { s } else { t })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, labels: Vec<u8>, depth: Vec<f64>, rgb: u8) -> SceneSample {
        let n = labels.len();
        let image: Vec<u8> = (0..n as u8).flat_map(|i| [rgb, i, rgb]).collect();
        SceneSample::new(
            id,
            Image::new(2, 2, image).unwrap(),
            LabelMap::new(2, 2, 4, labels).unwrap(),
            DepthMap::new(2, 2, depth).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn selection_is_half_rounded_up_and_deterministic() {
        let labels = LabelMap::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let a = select_classes(&labels, 11).unwrap();
        assert_eq!(a.chosen.len(), 2);
        assert!(a.chosen.iter().all(|c| *c < 4));
        assert_eq!(a, select_classes(&labels, 11).unwrap());

        let single = LabelMap::new(2, 2, 5, vec![4, 4, IGNORE, 4]).unwrap();
        assert_eq!(
            select_classes(&single, 3).unwrap().chosen,
            BTreeSet::from([4])
        );

        let empty = LabelMap::filled(2, 2, 5, IGNORE).unwrap();
        assert!(matches!(select_classes(&empty, 0), Err(Error::EmptySource)));
    }

    #[test]
    fn mask_membership() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 1, 2, 0]).unwrap();
        let sel = |c: &[u8]| ClassSelection {
            chosen: c.iter().copied().collect(),
            seed: 0,
        };
        assert_eq!(
            build_mask(&labels, &sel(&[0])).data(),
            &[true, false, false, true]
        );
        assert_eq!(build_mask(&labels, &sel(&[])).count(), 0);

        let with_ignore = LabelMap::new(2, 2, 3, vec![0, IGNORE, 2, 1]).unwrap();
        assert_eq!(
            build_mask(&with_ignore, &sel(&[0, 1, 2])).data(),
            &[true, false, true, true]
        );
    }

    #[test]
    fn composite_extremes_and_single_pixel() {
        let s = sample("s", vec![0, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0], 10);
        let t = sample("t", vec![3, 3, 1, 1], vec![9.0, 8.0, 7.0, 6.0], 200);

        let none = composite(&s, &t, &MixMask::filled(2, 2, false)).unwrap();
        assert_eq!(none.image(), t.image());
        assert_eq!(none.labels(), t.labels());
        assert_eq!(none.depth(), t.depth());

        let all = composite(&s, &t, &MixMask::filled(2, 2, true)).unwrap();
        assert_eq!(all.image(), s.image());
        assert_eq!(all.labels(), s.labels());
        assert_eq!(all.depth(), s.depth());

        let m = MixMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let one = composite(&s, &t, &m).unwrap();
        assert_eq!(one.labels().data(), &[0, 3, 1, 1]);
        assert_eq!(one.depth().data(), &[1.0, 8.0, 7.0, 6.0]);
        assert_eq!(one.image().pixel(0), s.image().pixel(0));
        for i in 1..4 {
            assert_eq!(one.image().pixel(i), t.image().pixel(i));
        }
    }

    #[test]
    fn composite_dimension_mismatch() {
        let s = sample("s", vec![0; 4], vec![1.0; 4], 0);
        assert!(matches!(
            composite(&s, &s, &MixMask::filled(3, 1, true)),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
