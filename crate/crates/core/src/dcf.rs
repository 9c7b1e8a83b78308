//! Depth-guided contextual filtering of a copy-paste mask.
//!
//! The target frame's per-class depth densities (computed from its pseudo
//! labels) are compared with the densities of the naively mixed frame. For
//! each pasted class whose density moves by more than that class's
//! threshold in some depth interval, the offending pasted pixels are
//! dropped from the mask, either in the violating intervals only
//! ([`FilterMode::PerBin`]) or for the whole class
//! ([`FilterMode::WholeClass`]).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::depth_stats::{histogram_delta, ClassDepthHistogram, DepthBinning};
use crate::error::{Error, Result};
use crate::mixer::composite;
use crate::scene::{MixMask, SceneSample, IGNORE};

/// Default threshold for large-area classes.
pub const STUFF_THRESHOLD: f64 = 0.15;
/// Default threshold for small-object classes.
pub const THING_THRESHOLD: f64 = 0.05;

/// Class names treated as large-area regions when no list is configured.
pub const DEFAULT_STUFF_CLASSES: &[&str] = &[
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "vegetation",
    "terrain",
    "sky",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    per_class: Vec<f64>,
    default: f64,
}

fn check_tau(tau: f64) -> Result<f64> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "thresholds must be non-negative, got {tau}"
        )));
    }
    Ok(tau)
}

impl ThresholdTable {
    pub fn new(per_class: Vec<f64>, default: f64) -> Result<Self> {
        check_tau(default)?;
        for &t in &per_class {
            check_tau(t)?;
        }
        Ok(Self { per_class, default })
    }

    pub fn uniform(classes: usize, tau: f64) -> Result<Self> {
        Self::new(vec![tau; classes], tau)
    }

    /// Threshold for `class`; classes beyond the table use the default.
    pub fn get(&self, class: usize) -> f64 {
        self.per_class.get(class).copied().unwrap_or(self.default)
    }

    pub fn default_tau(&self) -> f64 {
        self.default
    }

    pub fn per_class(&self) -> &[f64] {
        &self.per_class
    }

    pub fn set(&mut self, class: usize, tau: f64) -> Result<()> {
        let tau = check_tau(tau)?;
        if class >= self.per_class.len() {
            self.per_class.resize(class + 1, self.default);
        }
        self.per_class[class] = tau;
        Ok(())
    }

    /// Overrides the threshold of the class called `name`.
    pub fn set_named(&mut self, class_names: &[String], name: &str, tau: f64) -> Result<()> {
        let idx = class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown class name {name:?}")))?;
        self.set(idx, tau)
    }
}

/// 0.15 for classes listed in `stuff_classes`, 0.05 otherwise.
pub fn default_thresholds(
    class_names: &[String],
    stuff_classes: &BTreeSet<String>,
) -> ThresholdTable {
    let per_class = class_names
        .iter()
        .map(|n| {
            if stuff_classes.contains(n) {
                STUFF_THRESHOLD
            } else {
                THING_THRESHOLD
            }
        })
        .collect();
    ThresholdTable {
        per_class,
        default: THING_THRESHOLD,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    PerBin,
    #[default]
    WholeClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFilterStats {
    pub class: u8,
    pub pasted: usize,
    pub removed: usize,
    pub max_delta: f64,
    pub violating_bins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub per_class: Vec<ClassFilterStats>,
    pub mask_before: MixMask,
    pub mask_after: MixMask,
}

impl FilterReport {
    pub fn pasted_total(&self) -> usize {
        self.per_class.iter().map(|c| c.pasted).sum()
    }

    pub fn removed_total(&self) -> usize {
        self.per_class.iter().map(|c| c.removed).sum()
    }

    pub fn class(&self, class: u8) -> Option<&ClassFilterStats> {
        self.per_class.iter().find(|c| c.class == class)
    }
}

fn check_dims(target: &SceneSample, source: &SceneSample, mask: &MixMask) -> Result<()> {
    let dims = (target.width(), target.height());
    if (source.width(), source.height()) != dims || (mask.width(), mask.height()) != dims {
        return Err(Error::DimensionMismatch(format!(
            "target {}x{}, source {}x{}, mask {}x{}",
            dims.0,
            dims.1,
            source.width(),
            source.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Filters `mask` against the depth layout of `target`, whose label plane
/// holds pseudo labels.
pub fn dcf_filter(
    target: &SceneSample,
    source: &SceneSample,
    mask: &MixMask,
    binning: &DepthBinning,
    thresholds: &ThresholdTable,
    mode: FilterMode,
) -> Result<(MixMask, FilterReport)> {
    check_dims(target, source, mask)?;
    let classes = source.labels().classes().max(target.labels().classes());
    let prior = ClassDepthHistogram::from_pixels(
        classes,
        binning,
        target
            .labels()
            .data()
            .iter()
            .copied()
            .zip(target.depth().data().iter().copied()),
    );
    dcf_filter_with_prior(&prior, target, source, mask, binning, thresholds, mode)
}

/// As [`dcf_filter`], reusing an already computed target density table.
pub fn dcf_filter_with_prior(
    prior: &ClassDepthHistogram,
    target: &SceneSample,
    source: &SceneSample,
    mask: &MixMask,
    binning: &DepthBinning,
    thresholds: &ThresholdTable,
    mode: FilterMode,
) -> Result<(MixMask, FilterReport)> {
    check_dims(target, source, mask)?;
    if prior.edges() != binning.edges() {
        return Err(Error::BinningMismatch(format!(
            "prior table has {} bins, filter binning has {}",
            prior.n_bins(),
            binning.n_bins()
        )));
    }
    let classes = prior.classes();
    let m = mask.data();
    let src_labels = source.labels().data();
    let src_depth = source.depth().data();

    let mixed = ClassDepthHistogram::from_pixels(
        classes,
        binning,
        m.iter().enumerate().map(|(p, &pasted)| {
            if pasted {
                (src_labels[p], src_depth[p])
            } else {
                (target.labels().data()[p], target.depth().data()[p])
            }
        }),
    );

    let mut pasted_counts = vec![0usize; classes];
    for (p, &pasted) in m.iter().enumerate() {
        let l = src_labels[p];
        if pasted && l != IGNORE && (l as usize) < classes {
            pasted_counts[l as usize] += 1;
        }
    }

    // per class: which bins violate, or None if the class is untouched
    let mut violating: Vec<Option<Vec<bool>>> = vec![None; classes];
    let mut per_class = Vec::new();
    for class in (0..classes).filter(|&c| pasted_counts[c] > 0) {
        let delta = histogram_delta(prior, &mixed, class)?;
        let tau = thresholds.get(class);
        let flags: Vec<bool> = delta.iter().map(|&d| d > tau).collect();
        per_class.push(ClassFilterStats {
            class: class as u8,
            pasted: pasted_counts[class],
            removed: 0,
            max_delta: delta.iter().copied().fold(0.0, f64::max),
            violating_bins: (0..flags.len()).filter(|&k| flags[k]).collect(),
        });
        if flags.iter().any(|&f| f) {
            violating[class] = Some(flags);
        }
    }

    let mut filtered = mask.clone();
    let mut removed = vec![0usize; classes];
    for (p, &pasted) in m.iter().enumerate() {
        let l = src_labels[p];
        if !pasted || l == IGNORE || (l as usize) >= classes {
            continue;
        }
        let Some(flags) = &violating[l as usize] else {
            continue;
        };
        let drop = match mode {
            FilterMode::WholeClass => true,
            FilterMode::PerBin => binning.bin_of(src_depth[p]).is_some_and(|k| flags[k]),
        };
        if drop {
            filtered.set(p, false);
            removed[l as usize] += 1;
        }
    }
    for stats in &mut per_class {
        stats.removed = removed[stats.class as usize];
    }

    let report = FilterReport {
        per_class,
        mask_before: mask.clone(),
        mask_after: filtered.clone(),
    };
    Ok((filtered, report))
}

/// Composites the filtered sample; same contract as [`composite`].
pub fn apply_filtered_mask(
    source: &SceneSample,
    target: &SceneSample,
    filtered: &MixMask,
) -> Result<SceneSample> {
    composite(source, target, filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{DepthMap, Image, LabelMap};

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    fn sample(labels: Vec<u8>, depth: Vec<f64>) -> SceneSample {
        SceneSample::new(
            "x",
            Image::filled(2, 2, [0, 0, 0]),
            LabelMap::new(2, 2, 3, labels).unwrap(),
            DepthMap::new(2, 2, depth).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn default_threshold_values() {
        let n = names(&["sky", "pole"]);
        let stuff: BTreeSet<String> = DEFAULT_STUFF_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut t = default_thresholds(&n, &stuff);
        assert_eq!(t.get(0), 0.15);
        assert_eq!(t.get(1), 0.05);
        t.set_named(&n, "sky", 0.2).unwrap();
        assert_eq!(t.get(0), 0.2);
        assert!(t.set_named(&n, "tree", 0.2).is_err());
        assert!(ThresholdTable::uniform(2, -1.0).is_err());
    }

    #[test]
    fn infinite_threshold_keeps_mask() {
        let t = sample(vec![0, 0, 1, 1], vec![1.0, 1.0, 9.0, 9.0]);
        let s = sample(vec![1, 1, 0, 2], vec![1.0, 1.0, 9.0, 9.0]);
        let mask = MixMask::filled(2, 2, true);
        let binning = DepthBinning::from_edges(vec![0.0, 3.0, 10.0]).unwrap();
        let inf = ThresholdTable::uniform(3, f64::INFINITY).unwrap();
        for mode in [FilterMode::PerBin, FilterMode::WholeClass] {
            let (f, r) = dcf_filter(&t, &s, &mask, &binning, &inf, mode).unwrap();
            assert_eq!(f, mask);
            assert_eq!(r.removed_total(), 0);
        }
    }

    #[test]
    fn zero_threshold_removes_unseen_depth() {
        // target shows class 1 only far; source pastes it near
        let t = sample(vec![0, 0, 1, 1], vec![1.0, 1.0, 9.0, 9.0]);
        let s = sample(vec![1, 0, 0, 0], vec![1.0, 1.0, 1.0, 1.0]);
        let mask = MixMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let binning = DepthBinning::from_edges(vec![0.0, 3.0, 10.0]).unwrap();
        let zero = ThresholdTable::uniform(3, 0.0).unwrap();
        let (f, r) = dcf_filter(&t, &s, &mask, &binning, &zero, FilterMode::WholeClass).unwrap();
        assert_eq!(f.count(), 0);
        let stats = r.class(1).unwrap();
        assert_eq!((stats.pasted, stats.removed), (1, 1));
        assert!((stats.max_delta - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.violating_bins, vec![0, 1]);
    }

    #[test]
    fn per_bin_only_clears_violating_depths() {
        let wide = |labels: Vec<u8>, depth: Vec<f64>| {
            SceneSample::new(
                "w",
                Image::filled(3, 2, [0, 0, 0]),
                LabelMap::new(3, 2, 2, labels).unwrap(),
                DepthMap::new(3, 2, depth).unwrap(),
            )
            .unwrap()
        };
        let t = wide(vec![1, 1, 0, 0, 0, 0], vec![5.0, 9.0, 1.0, 1.0, 1.0, 1.0]);
        let s = wide(vec![0, 0, 1, 1, 0, 0], vec![1.0, 1.0, 1.0, 5.0, 1.0, 1.0]);
        let mask = MixMask::new(3, 2, vec![false, false, true, true, false, false]).unwrap();
        let binning = DepthBinning::from_edges(vec![0.0, 3.0, 6.0, 10.0]).unwrap();
        let tau = ThresholdTable::uniform(2, 0.1).unwrap();
        // class 1: prior (0, .5, .5), mixed (.25, .5, .25)
        let (f, r) = dcf_filter(&t, &s, &mask, &binning, &tau, FilterMode::PerBin).unwrap();
        assert_eq!(f.data(), &[false, false, false, true, false, false]);
        let stats = r.class(1).unwrap();
        assert_eq!(stats.violating_bins, vec![0, 2]);
        assert_eq!(stats.removed, 1);
        let (w, _) = dcf_filter(&t, &s, &mask, &binning, &tau, FilterMode::WholeClass).unwrap();
        assert_eq!(w.count(), 0);
    }

    #[test]
    fn prior_with_other_edges_is_binning_mismatch() {
        let t = sample(vec![0; 4], vec![1.0; 4]);
        let binning = DepthBinning::from_edges(vec![0.0, 3.0, 10.0]).unwrap();
        let other = DepthBinning::from_edges(vec![0.0, 5.0]).unwrap();
        let prior = ClassDepthHistogram::empty(3, &other);
        let tau = ThresholdTable::uniform(3, 0.1).unwrap();
        let mask = MixMask::filled(2, 2, false);
        assert!(matches!(
            dcf_filter_with_prior(
                &prior,
                &t,
                &t,
                &mask,
                &binning,
                &tau,
                FilterMode::WholeClass
            ),
            Err(Error::BinningMismatch(_))
        ));
        let wrong = MixMask::filled(1, 1, false);
        assert!(matches!(
            dcf_filter(&t, &t, &wrong, &binning, &tau, FilterMode::WholeClass),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn filtered_composite_cases() {
        let t = sample(vec![0, 0, 1, 1], vec![1.0, 1.0, 9.0, 9.0]);
        let s = sample(vec![2, 2, 2, 2], vec![2.0, 2.0, 2.0, 2.0]);
        let mask = MixMask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(
            apply_filtered_mask(&s, &t, &mask).unwrap(),
            composite(&s, &t, &mask).unwrap()
        );
        let none = apply_filtered_mask(&s, &t, &MixMask::filled(2, 2, false)).unwrap();
        assert_eq!(none.labels(), t.labels());
        assert_eq!(none.depth(), t.depth());
    }
}
