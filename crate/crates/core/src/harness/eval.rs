//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{LabelMap, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `confusion[truth][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes that appear in neither truth nor prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over classes present in the ground truth.
    pub miou: f64,
}

/// Accumulates predictions against ground truth; ignore-labelled truth
/// pixels are skipped.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &LabelMap, prediction: &LabelMap) -> Result<()> {
        if truth.data().len() != prediction.data().len() {
            return Err(Error::DimensionMismatch(format!(
                "truth has {} pixels, prediction {}",
                truth.data().len(),
                prediction.data().len()
            )));
        }
        for (&t, &p) in truth.data().iter().zip(prediction.data()) {
            if t == IGNORE {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::ClassOutOfRange {
                    value: t.max(p) as u8,
                    classes: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn result(&self) -> EvalResult {
        let c = self.classes;
        let at = |t: usize, p: usize| self.counts[t * c + p];
        let mut per_class_iou = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut supported = 0usize;
        for i in 0..c {
            let tp = at(i, i);
            let fn_: u64 = (0..c).map(|p| at(i, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|t| at(t, i)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            if tp + fn_ > 0 {
                sum += iou.unwrap_or(0.0);
                supported += 1;
            }
            per_class_iou.push(iou);
        }
        EvalResult {
            confusion: (0..c)
                .map(|t| self.counts[t * c..(t + 1) * c].to_vec())
                .collect(),
            per_class_iou,
            miou: if supported == 0 {
                0.0
            } else {
                sum / supported as f64
            },
        }
    }
}
