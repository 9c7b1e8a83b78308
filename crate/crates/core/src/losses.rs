//! Segmentation and depth objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{DepthMap, LabelMap, IGNORE};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// berHu switches from L1 to scaled L2 at this fraction of the largest residual.
pub const BERHU_FRACTION: f64 = 0.2;

/// Default weight of the depth term in [`total_loss`].
pub const DEFAULT_LAMBDA_DEPTH: f64 = 1e-3;

/// Confidence a pseudo label needs to contribute to the loss.
pub const DEFAULT_PSEUDO_THRESHOLD: f64 = 0.968;

/// Class probabilities laid out channel-major, `classes × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    classes: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(classes: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if data.len() != classes * n {
            return Err(Error::ShapeMismatch(format!(
                "prob map data length {} != {classes}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        for px in 0..n {
            let s: f64 = (0..classes).map(|c| data[c * n + px]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at pixel {px} sum to {s}"
                )));
            }
        }
        Ok(Self {
            classes,
            width,
            height,
            data,
        })
    }

    /// Channel-wise softmax of `classes × height × width` logits.
    pub fn from_logits(
        classes: usize,
        width: usize,
        height: usize,
        logits: &[f64],
    ) -> Result<Self> {
        let n = width * height;
        if logits.len() != classes * n {
            return Err(Error::ShapeMismatch(format!(
                "logit length {} != {classes}x{height}x{width}",
                logits.len()
            )));
        }
        let mut data = vec![0.0; logits.len()];
        for px in 0..n {
            let max = (0..classes)
                .map(|c| logits[c * n + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (logits[c * n + px] - max).exp();
                data[c * n + px] = e;
                z += e;
            }
            for c in 0..classes {
                data[c * n + px] /= z;
            }
        }
        Ok(Self {
            classes,
            width,
            height,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.data[class * self.width * self.height + pixel]
    }

    /// Most likely class and its probability at `pixel`.
    pub fn argmax(&self, pixel: usize) -> (u8, f64) {
        let mut best = (0u8, f64::NEG_INFINITY);
        for c in 0..self.classes {
            let p = self.get(c, pixel);
            if p > best.1 {
                best = (c as u8, p);
            }
        }
        best
    }

    /// Element-wise mean of several maps of equal shape.
    pub fn average(maps: &[&ProbMap]) -> Result<ProbMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
        let mut data = vec![0.0; first.data.len()];
        for m in maps {
            if (m.classes, m.width, m.height) != (first.classes, first.width, first.height) {
                return Err(Error::ShapeMismatch(
                    "averaged prob maps differ in shape".into(),
                ));
            }
            for (a, b) in data.iter_mut().zip(&m.data) {
                *a += b;
            }
        }
        let k = maps.len() as f64;
        data.iter_mut().for_each(|v| *v /= k);
        Ok(ProbMap {
            data,
            ..(*first).clone()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub pixel_count: usize,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            pixel_count: 0,
        }
    }
}

fn check_plane(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

fn check_ce_inputs(pred: &ProbMap, labels: &LabelMap, weights: &[f64]) -> Result<()> {
    check_plane(
        "label map",
        (labels.width(), labels.height()),
        (pred.width, pred.height),
    )?;
    if weights.len() != pred.width * pred.height {
        return Err(Error::ShapeMismatch(format!(
            "{} pixel weights for {} pixels",
            weights.len(),
            pred.width * pred.height
        )));
    }
    if labels.classes() > pred.classes {
        return Err(Error::ShapeMismatch(format!(
            "labels have {} classes, predictions {}",
            labels.classes(),
            pred.classes
        )));
    }
    Ok(())
}

/// Weighted cross-entropy averaged over all non-ignore pixels.
pub fn cross_entropy(
    pred: &ProbMap,
    labels: &LabelMap,
    pixel_weights: &[f64],
) -> Result<LossValue> {
    check_ce_inputs(pred, labels, pixel_weights)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (px, (&l, &w)) in labels.data().iter().zip(pixel_weights).enumerate() {
        if l == IGNORE {
            continue;
        }
        count += 1;
        sum -= w * pred.get(l as usize, px).max(PROB_FLOOR).ln();
    }
    Ok(LossValue {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        pixel_count: count,
    })
}

/// Cross-entropy plus its gradient with respect to the logits that produced
/// `pred` through a softmax, laid out like `pred`.
pub fn cross_entropy_with_logit_grad(
    pred: &ProbMap,
    labels: &LabelMap,
    pixel_weights: &[f64],
) -> Result<(LossValue, Vec<f64>)> {
    let loss = cross_entropy(pred, labels, pixel_weights)?;
    let n = pred.width * pred.height;
    let mut grad = vec![0.0; pred.data.len()];
    if loss.pixel_count == 0 {
        return Ok((loss, grad));
    }
    let scale = 1.0 / loss.pixel_count as f64;
    for (px, (&l, &w)) in labels.data().iter().zip(pixel_weights).enumerate() {
        if l == IGNORE || w == 0.0 {
            continue;
        }
        for c in 0..pred.classes {
            let target = if c == l as usize { 1.0 } else { 0.0 };
            grad[c * n + px] = w * scale * (pred.data[c * n + px] - target);
        }
    }
    Ok((loss, grad))
}

/// Reverse Huber penalty for one residual with switch point `h`.
pub fn berhu_value(residual: f64, h: f64) -> f64 {
    let a = residual.abs();
    if a <= h {
        a
    } else {
        (residual * residual + h * h) / (2.0 * h)
    }
}

fn berhu_inner(pred: &DepthMap, truth: &DepthMap) -> Result<(LossValue, f64, Vec<usize>)> {
    check_plane(
        "predicted depth",
        (pred.width(), pred.height()),
        (truth.width(), truth.height()),
    )?;
    let valid: Vec<usize> = (0..truth.data().len())
        .filter(|&i| truth.data()[i] > 0.0)
        .collect();
    let max = valid
        .iter()
        .map(|&i| (pred.data()[i] - truth.data()[i]).abs())
        .fold(0.0, f64::max);
    let h = BERHU_FRACTION * max;
    let count = valid.len();
    if h == 0.0 {
        return Ok((
            LossValue {
                value: 0.0,
                pixel_count: count,
            },
            h,
            valid,
        ));
    }
    let sum: f64 = valid
        .iter()
        .map(|&i| berhu_value(pred.data()[i] - truth.data()[i], h))
        .sum();
    Ok((
        LossValue {
            value: sum / count as f64,
            pixel_count: count,
        },
        h,
        valid,
    ))
}

/// Mean berHu over pixels with valid ground-truth depth, with the switch
/// point at 0.2 of this map's largest absolute residual.
pub fn berhu(pred_depth: &DepthMap, true_depth: &DepthMap) -> Result<LossValue> {
    berhu_inner(pred_depth, true_depth).map(|(l, _, _)| l)
}

/// berHu on raw predictions (which may be negative) with the gradient
/// with respect to each prediction, treating the switch point as constant.
pub fn berhu_with_grad(pred: &[f64], truth: &DepthMap) -> Result<(LossValue, Vec<f64>)> {
    if pred.len() != truth.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} depth pixels",
            pred.len(),
            truth.data().len()
        )));
    }
    let t = truth.data();
    let valid: Vec<usize> = (0..t.len()).filter(|&i| t[i] > 0.0).collect();
    let max = valid
        .iter()
        .map(|&i| (pred[i] - t[i]).abs())
        .fold(0.0, f64::max);
    let h = BERHU_FRACTION * max;
    let mut grad = vec![0.0; pred.len()];
    if h == 0.0 {
        return Ok((
            LossValue {
                value: 0.0,
                pixel_count: valid.len(),
            },
            grad,
        ));
    }
    let scale = 1.0 / valid.len() as f64;
    let mut sum = 0.0;
    for &i in &valid {
        let e = pred[i] - t[i];
        sum += berhu_value(e, h);
        grad[i] = scale * if e.abs() <= h { e.signum() } else { e / h };
    }
    Ok((
        LossValue {
            value: sum * scale,
            pixel_count: valid.len(),
        },
        grad,
    ))
}

/// The five per-head terms of the multi-task objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub hr_source: f64,
    pub vis_source: f64,
    pub depth_source: f64,
    pub hr_mixed: f64,
    pub vis_mixed: f64,
}

/// `hr_s + vis_s + λ·depth_s + hr_f + vis_f`.
pub fn total_loss(terms: &LossTerms, lambda_depth: f64) -> LossValue {
    LossValue::scalar(
        terms.hr_source
            + terms.vis_source
            + lambda_depth * terms.depth_source
            + terms.hr_mixed
            + terms.vis_mixed,
    )
}

/// How confident pseudo labels are turned into per-pixel loss weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoWeighting {
    /// 1 where the top probability reaches the threshold, else 0.
    #[default]
    Hard,
    /// Every pixel weighted by the fraction of confident pixels.
    Proportion,
}

pub fn pseudo_weights(probs: &ProbMap, threshold: f64, mode: PseudoWeighting) -> Vec<f64> {
    let n = probs.width * probs.height;
    let hard: Vec<f64> = (0..n)
        .map(|px| {
            if probs.argmax(px).1 >= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    match mode {
        PseudoWeighting::Hard => hard,
        PseudoWeighting::Proportion => {
            let frac = if n == 0 {
                0.0
            } else {
                hard.iter().sum::<f64>() / n as f64
            };
            vec![frac; n]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_prediction_has_zero_loss() {
        let labels = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
        let pred = ProbMap::new(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = cross_entropy(&pred, &labels, &[1.0, 1.0]).unwrap();
        assert!(l.value <= 1e-11);
        assert_eq!(l.pixel_count, 2);
    }

    #[test]
    fn uniform_prediction_is_log_c() {
        let labels = LabelMap::new(3, 1, 4, vec![0, 2, 3]).unwrap();
        let pred = ProbMap::new(4, 3, 1, vec![0.25; 12]).unwrap();
        let l = cross_entropy(&pred, &labels, &[1.0; 3]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn weighted_two_pixel_case() {
        let labels = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
        // pixel 0: p(true=0)=0.9, pixel 1: p(true=1)=0.5
        let pred = ProbMap::new(2, 2, 1, vec![0.9, 0.5, 0.1, 0.5]).unwrap();
        let l = cross_entropy(&pred, &labels, &[1.0, 0.5]).unwrap();
        let want = (-(0.9f64.ln()) - 0.5 * 0.5f64.ln()) / 2.0;
        assert!((l.value - want).abs() < 1e-15);
    }

    #[test]
    fn ignore_pixels_skipped_and_shapes_checked() {
        let labels = LabelMap::new(2, 1, 2, vec![IGNORE, 1]).unwrap();
        let pred = ProbMap::new(2, 2, 1, vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        let l = cross_entropy(&pred, &labels, &[1.0, 1.0]).unwrap();
        assert_eq!(l.pixel_count, 1);
        assert!((l.value + 0.8f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&pred, &labels, &[1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logit_grad_matches_finite_difference() {
        let labels = LabelMap::new(2, 1, 3, vec![2, 0]).unwrap();
        let logits = vec![0.3, -1.0, 0.2, 0.5, 1.1, -0.4];
        let w = [0.7, 1.0];
        let f = |z: &[f64]| {
            let p = ProbMap::from_logits(3, 2, 1, z).unwrap();
            cross_entropy(&p, &labels, &w).unwrap().value
        };
        let p = ProbMap::from_logits(3, 2, 1, &logits).unwrap();
        let (_, g) = cross_entropy_with_logit_grad(&p, &labels, &w).unwrap();
        for i in 0..logits.len() {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn berhu_examples() {
        let truth = DepthMap::new(2, 1, vec![10.0, 10.0]).unwrap();
        assert_eq!(berhu(&truth, &truth).unwrap().value, 0.0);

        let pred = DepthMap::new(2, 1, vec![11.0, 15.0]).unwrap();
        assert!((berhu(&pred, &truth).unwrap().value - 7.0).abs() < 1e-12);

        let one = DepthMap::new(1, 1, vec![3.0]).unwrap();
        let pred = DepthMap::new(1, 1, vec![5.0]).unwrap();
        assert!((berhu(&pred, &one).unwrap().value - 5.2).abs() < 1e-12);
    }

    #[test]
    fn berhu_skips_invalid_truth() {
        let truth = DepthMap::new(2, 1, vec![0.0, 10.0]).unwrap();
        let pred = DepthMap::new(2, 1, vec![50.0, 12.0]).unwrap();
        let l = berhu(&pred, &truth).unwrap();
        assert_eq!(l.pixel_count, 1);
        assert!((l.value - 5.2).abs() < 1e-12);
    }

    #[test]
    fn berhu_continuous_at_switch() {
        for h in [0.1, 1.0, 7.5] {
            assert!((berhu_value(h, h) - h).abs() < 1e-12);
            let above = berhu_value(h * (1.0 + 1e-12), h);
            assert!((above - h).abs() < 1e-9);
        }
    }

    #[test]
    fn berhu_grad_matches_finite_difference() {
        let truth = DepthMap::new(4, 1, vec![5.0, 0.0, 12.0, 30.0]).unwrap();
        let pred = vec![5.5, 3.0, 7.0, 31.0];
        let (_, g) = berhu_with_grad(&pred, &truth).unwrap();
        // H is fixed by the largest residual (pixel 2); perturb the others
        for i in [0, 3] {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (berhu_with_grad(&a, &truth).unwrap().0.value
                - berhu_with_grad(&b, &truth).unwrap().0.value)
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossTerms {
            hr_source: 1.0,
            vis_source: 1.0,
            depth_source: 1.0,
            hr_mixed: 1.0,
            vis_mixed: 1.0,
        };
        assert!((total_loss(&ones, 1e-3).value - 4.001).abs() < 1e-12);
        assert_eq!(total_loss(&LossTerms::default(), 1e-3).value, 0.0);
        let t = LossTerms {
            hr_source: 0.5,
            vis_source: 0.2,
            depth_source: 10.0,
            hr_mixed: 0.4,
            vis_mixed: 0.3,
        };
        assert!((total_loss(&t, 1e-3).value - 1.41).abs() < 1e-12);
    }

    #[test]
    fn pseudo_weight_modes() {
        let p = ProbMap::new(2, 2, 1, vec![0.97, 0.5, 0.03, 0.5]).unwrap();
        assert_eq!(
            pseudo_weights(&p, 0.968, PseudoWeighting::Hard),
            vec![1.0, 0.0]
        );
        assert_eq!(
            pseudo_weights(&p, 0.968, PseudoWeighting::Proportion),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(2, 1, 1, vec![0.5]).is_err());
        let p = ProbMap::from_logits(2, 1, 1, &[1000.0, 0.0]).unwrap();
        assert_eq!(p.argmax(0).0, 0);
    }
}
