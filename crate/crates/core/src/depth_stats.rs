//! Depth intervals and per-class depth-density tables.
//!
//! A [`ClassDepthHistogram`] holds, for every class, the fraction of that
//! class's valid pixels falling in each depth interval. Ignore-labelled and
//! invalid-depth pixels count towards neither the numerator nor the support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{DepthMap, LabelMap, IGNORE};

/// Near edge of the first geometric interval for log binning, in metres.
pub const LOG_MIN_DEPTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScale {
    #[default]
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinning {
    edges: Vec<f64>,
    scale: BinScale,
}

impl DepthBinning {
    /// `n_bins` intervals covering `[0, d_max]`. Log spacing is geometric
    /// from [`LOG_MIN_DEPTH`] to `d_max`, with the first edge pinned to zero.
    pub fn new(n_bins: usize, d_max: f64, scale: BinScale) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
        }
        if !(d_max.is_finite() && d_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "d_max must be positive, got {d_max}"
            )));
        }
        let n = n_bins as f64;
        let edges = match scale {
            BinScale::Linear => (0..=n_bins).map(|k| k as f64 * d_max / n).collect(),
            BinScale::Log => {
                if n_bins == 1 {
                    vec![0.0, d_max]
                } else {
                    if d_max <= LOG_MIN_DEPTH {
                        return Err(Error::InvalidArgument(format!(
                            "log binning needs d_max > {LOG_MIN_DEPTH}, got {d_max}"
                        )));
                    }
                    let ratio = d_max / LOG_MIN_DEPTH;
                    let mut edges = vec![0.0];
                    edges.extend(
                        (0..n_bins).map(|k| LOG_MIN_DEPTH * ratio.powf(k as f64 / (n - 1.0))),
                    );
                    // pin the top edge against powf rounding
                    edges[n_bins] = d_max;
                    edges
                }
            }
        };
        Ok(Self { edges, scale })
    }

    /// Explicit edges; must start at zero and strictly increase.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument("need at least two edges".into()));
        }
        if edges[0] != 0.0 {
            return Err(Error::InvalidArgument("first edge must be 0".into()));
        }
        if edges.windows(2).any(|w| {
            w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater) || !w[1].is_finite()
        }) {
            return Err(Error::InvalidArgument(
                "edges must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            edges,
            scale: BinScale::Linear,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn scale(&self) -> BinScale {
        self.scale
    }

    pub fn d_max(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Half-open `[edge_k, edge_k+1)` lookup. Depths past the last edge land
    /// in the final bin; the zero sentinel (or any non-positive or NaN
    /// depth) has no bin.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if depth.is_nan() || depth <= 0.0 {
            return None;
        }
        let n = self.n_bins();
        let k = self.edges[..n].partition_point(|&e| e <= depth);
        Some(k.saturating_sub(1).min(n - 1))
    }
}

pub fn make_binning(n_bins: usize, d_max: f64, scale: BinScale) -> Result<DepthBinning> {
    DepthBinning::new(n_bins, d_max, scale)
}

pub fn bin_of(depth: f64, binning: &DepthBinning) -> Option<usize> {
    binning.bin_of(depth)
}

/// Per-class normalized depth densities, with the raw counts kept so that
/// tables can be merged.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDepthHistogram {
    classes: usize,
    edges: Vec<f64>,
    counts: Vec<u64>,
    support: Vec<u64>,
    densities: Vec<f64>,
}

impl ClassDepthHistogram {
    pub fn empty(classes: usize, binning: &DepthBinning) -> Self {
        let n = binning.n_bins();
        Self {
            classes,
            edges: binning.edges().to_vec(),
            counts: vec![0; classes * n],
            support: vec![0; classes],
            densities: vec![0.0; classes * n],
        }
    }

    /// Builds the table from `(label, depth)` pairs.
    pub fn from_pixels(
        classes: usize,
        binning: &DepthBinning,
        pixels: impl IntoIterator<Item = (u8, f64)>,
    ) -> Self {
        let mut h = Self::empty(classes, binning);
        let n = binning.n_bins();
        for (label, depth) in pixels {
            if label == IGNORE || label as usize >= classes {
                continue;
            }
            if let Some(k) = binning.bin_of(depth) {
                h.counts[label as usize * n + k] += 1;
                h.support[label as usize] += 1;
            }
        }
        h.normalize();
        h
    }

    /// Table from known per-class densities, e.g. analytic ones. Classes
    /// with any mass get unit support; raw counts stay zero, so such
    /// tables should not be merged.
    pub fn from_densities(binning: &DepthBinning, densities: Vec<Vec<f64>>) -> Result<Self> {
        let n = binning.n_bins();
        let classes = densities.len();
        let mut h = Self::empty(classes, binning);
        for (i, row) in densities.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "class {i} has {} densities for {n} bins",
                    row.len()
                )));
            }
            if row.iter().any(|&p| p > 0.0) {
                h.support[i] = 1;
            }
            h.densities[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        Ok(h)
    }

    fn normalize(&mut self) {
        let n = self.n_bins();
        for i in 0..self.classes {
            let s = self.support[i];
            for k in 0..n {
                self.densities[i * n + k] = if s == 0 {
                    0.0
                } else {
                    self.counts[i * n + k] as f64 / s as f64
                };
            }
        }
    }

    /// Adds another table's pixel counts into this one.
    pub fn merge(&mut self, other: &ClassDepthHistogram) -> Result<()> {
        check_compatible(self, other)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.support.iter_mut().zip(&other.support) {
            *a += b;
        }
        self.normalize();
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn densities(&self, class: usize) -> &[f64] {
        let n = self.n_bins();
        &self.densities[class * n..(class + 1) * n]
    }

    pub fn density(&self, class: usize, bin: usize) -> f64 {
        self.densities[class * self.n_bins() + bin]
    }

    pub fn counts(&self, class: usize) -> &[u64] {
        let n = self.n_bins();
        &self.counts[class * n..(class + 1) * n]
    }

    pub fn support(&self, class: usize) -> u64 {
        self.support[class]
    }

    /// Mean depth of a class using bin midpoints, `None` without support.
    pub fn mean_depth(&self, class: usize) -> Option<f64> {
        if self.support[class] == 0 {
            return None;
        }
        Some(
            self.densities(class)
                .iter()
                .zip(self.edges.windows(2))
                .map(|(p, e)| p * 0.5 * (e[0] + e[1]))
                .sum(),
        )
    }

    pub fn export(&self, class_names: &[String]) -> HistogramExport {
        HistogramExport {
            class_names: class_names.to_vec(),
            edges: self.edges.clone(),
            densities: (0..self.classes)
                .map(|i| self.densities(i).to_vec())
                .collect(),
            support: self.support.clone(),
        }
    }
}

/// JSON form written by the `stats` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramExport {
    pub class_names: Vec<String>,
    pub edges: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
    pub support: Vec<u64>,
}

pub fn class_depth_histogram(
    labels: &LabelMap,
    depth: &DepthMap,
    binning: &DepthBinning,
) -> Result<ClassDepthHistogram> {
    if (labels.width(), labels.height()) != (depth.width(), depth.height()) {
        return Err(Error::DimensionMismatch(format!(
            "labels {}x{} vs depth {}x{}",
            labels.width(),
            labels.height(),
            depth.width(),
            depth.height()
        )));
    }
    Ok(ClassDepthHistogram::from_pixels(
        labels.classes(),
        binning,
        labels
            .data()
            .iter()
            .copied()
            .zip(depth.data().iter().copied()),
    ))
}

fn check_compatible(a: &ClassDepthHistogram, b: &ClassDepthHistogram) -> Result<()> {
    if a.classes != b.classes || a.edges != b.edges {
        return Err(Error::ShapeMismatch(format!(
            "histograms differ: {} classes/{} bins vs {} classes/{} bins",
            a.classes,
            a.n_bins(),
            b.classes,
            b.n_bins()
        )));
    }
    Ok(())
}

/// Per-bin absolute density change of `class` between two tables.
pub fn histogram_delta(
    before: &ClassDepthHistogram,
    after: &ClassDepthHistogram,
    class: usize,
) -> Result<Vec<f64>> {
    check_compatible(before, after)?;
    if class >= before.classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            before.classes
        )));
    }
    Ok(before
        .densities(class)
        .iter()
        .zip(after.densities(class))
        .map(|(p, q)| (p - q).abs())
        .collect())
}

/// Total-variation distance between two density vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edges(e: &[f64]) -> DepthBinning {
        DepthBinning::from_edges(e.to_vec()).unwrap()
    }

    #[test]
    fn linear_edges() {
        let b = make_binning(4, 40.0, BinScale::Linear).unwrap();
        assert_eq!(b.edges(), &[0.0, 10.0, 20.0, 30.0, 40.0]);
        let b = make_binning(1, 10.0, BinScale::Linear).unwrap();
        assert_eq!(b.edges(), &[0.0, 10.0]);
        assert!(matches!(
            make_binning(0, 10.0, BinScale::Linear),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_binning(4, 0.0, BinScale::Linear).is_err());
    }

    #[test]
    fn log_edges() {
        let b = make_binning(4, 40.0, BinScale::Log).unwrap();
        let e = b.edges();
        assert_eq!(e.len(), 5);
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 0.5).abs() < 1e-12);
        assert_eq!(e[4], 40.0);
        let r1 = e[2] / e[1];
        let r2 = e[3] / e[2];
        assert!((r1 - r2).abs() < 1e-9);
        assert!(make_binning(3, 0.4, BinScale::Log).is_err());
    }

    #[test]
    fn bin_lookup_rules() {
        let b = edges(&[0.0, 10.0, 20.0, 30.0, 40.0]);
        assert_eq!(bin_of(10.0, &b), Some(1));
        assert_eq!(bin_of(9.999, &b), Some(0));
        assert_eq!(bin_of(99.0, &b), Some(3));
        assert_eq!(bin_of(40.0, &b), Some(3));
        assert_eq!(bin_of(0.0, &b), None);
        assert_eq!(bin_of(f64::NAN, &b), None);
    }

    #[test]
    fn two_class_histogram() {
        let labels = LabelMap::new(2, 2, 3, vec![0, 0, 1, 1]).unwrap();
        let depth = DepthMap::new(2, 2, vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        let h = class_depth_histogram(&labels, &depth, &edges(&[0.0, 3.0, 10.0])).unwrap();
        assert_eq!(h.densities(0), &[1.0, 0.0]);
        assert_eq!(h.densities(1), &[0.0, 1.0]);
        assert_eq!(h.densities(2), &[0.0, 0.0]);
        assert_eq!(h.support(2), 0);
    }

    #[test]
    fn split_class_histogram() {
        let labels = LabelMap::new(2, 2, 1, vec![0; 4]).unwrap();
        let depth = DepthMap::new(2, 2, vec![1.0, 5.0, 1.0, 5.0]).unwrap();
        let h = class_depth_histogram(&labels, &depth, &edges(&[0.0, 3.0, 10.0])).unwrap();
        assert_eq!(h.densities(0), &[0.5, 0.5]);
        assert_eq!(h.support(0), 4);
    }

    #[test]
    fn ignore_and_invalid_excluded() {
        let labels = LabelMap::new(3, 1, 2, vec![0, IGNORE, 0]).unwrap();
        let depth = DepthMap::new(3, 1, vec![1.0, 5.0, 0.0]).unwrap();
        let h = class_depth_histogram(&labels, &depth, &edges(&[0.0, 3.0, 10.0])).unwrap();
        assert_eq!(h.support(0), 1);
        assert_eq!(h.densities(0), &[1.0, 0.0]);
    }

    #[test]
    fn histogram_dimension_mismatch() {
        let labels = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
        let depth = DepthMap::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            class_depth_histogram(&labels, &depth, &edges(&[0.0, 3.0])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn delta_cases() {
        let b = edges(&[0.0, 3.0, 10.0]);
        let before = ClassDepthHistogram::from_pixels(2, &b, [(0, 1.0); 5]);
        let after = ClassDepthHistogram::from_pixels(
            2,
            &b,
            [(0, 1.0), (0, 1.0), (0, 1.0), (0, 5.0), (0, 5.0), (1, 5.0)],
        );
        let d = histogram_delta(&before, &after, 0).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-12 && (d[1] - 0.4).abs() < 1e-12);
        assert_eq!(
            histogram_delta(&before, &before, 0).unwrap(),
            vec![0.0, 0.0]
        );
        // class 1 has no support before: the pasted mass shows up in full
        assert_eq!(histogram_delta(&before, &after, 1).unwrap(), vec![0.0, 1.0]);

        let other = ClassDepthHistogram::empty(2, &edges(&[0.0, 3.0, 10.0, 20.0]));
        assert!(matches!(
            histogram_delta(&before, &other, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn merge_adds_counts() {
        let b = edges(&[0.0, 3.0, 10.0]);
        let mut a = ClassDepthHistogram::from_pixels(1, &b, [(0, 1.0)]);
        let c = ClassDepthHistogram::from_pixels(1, &b, [(0, 5.0), (0, 5.0), (0, 5.0)]);
        a.merge(&c).unwrap();
        assert_eq!(a.support(0), 4);
        assert_eq!(a.densities(0), &[0.25, 0.75]);
    }
}
