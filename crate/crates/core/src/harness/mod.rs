//! Desk-scale self-training: a toy per-pixel model trained on labelled
//! source frames plus source-onto-target mixes, with optional depth-guided
//! filtering of the paste masks after a warmup period.

mod eval;
mod features;
mod model;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{ConfusionMatrix, EvalResult};
pub use features::{extract, Features, N_FEATURES};
pub use model::{feature_stats, AfoConfig, AfoModule, Forward, LinearHead, ToyModel};

use crate::dcf::{dcf_filter, FilterMode, ThresholdTable};
use crate::depth_stats::DepthBinning;
use crate::error::{Error, Result};
use crate::losses::{
    berhu_with_grad, cross_entropy_with_logit_grad, pseudo_weights, total_loss, LossTerms, ProbMap,
    PseudoWeighting, DEFAULT_LAMBDA_DEPTH, DEFAULT_PSEUDO_THRESHOLD,
};
use crate::mixer::{build_mask, composite, select_classes};
use crate::scene::{LabelMap, MixMask, SceneSample};

/// Fraction of the run spent mixing without filtering when no explicit
/// warmup is configured.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First step at which filtering applies; defaults to a quarter of the run.
    pub warmup_iter: Option<usize>,
    pub pseudo_threshold: f64,
    pub pseudo_weighting: PseudoWeighting,
    pub lambda_depth: f64,
    pub dcf: bool,
    pub filter_mode: FilterMode,
    pub thresholds: ThresholdTable,
    pub binning: DepthBinning,
    pub seed: u64,
    /// Spread of the initial head weights.
    pub init_scale: f64,
    pub afo: Option<AfoConfig>,
}

impl TrainConfig {
    pub fn new(thresholds: ThresholdTable, binning: DepthBinning) -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 0.2,
            warmup_iter: None,
            pseudo_threshold: DEFAULT_PSEUDO_THRESHOLD,
            pseudo_weighting: PseudoWeighting::Hard,
            lambda_depth: DEFAULT_LAMBDA_DEPTH,
            dcf: true,
            filter_mode: FilterMode::WholeClass,
            thresholds,
            binning,
            seed: 0,
            init_scale: 0.01,
            afo: None,
        }
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_iter
            .unwrap_or_else(|| (DEFAULT_WARMUP_FRACTION * self.iterations as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.effective_warmup() > self.iterations {
            return bad(format!(
                "warmup_iter {} exceeds iterations {}",
                self.effective_warmup(),
                self.iterations
            ));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            return bad(format!(
                "pseudo_threshold {} outside [0, 1]",
                self.pseudo_threshold
            ));
        }
        if !(self.lambda_depth >= 0.0 && self.lambda_depth.is_finite()) {
            return bad("lambda_depth must be non-negative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be non-negative".into());
        }
        Ok(())
    }
}

/// One optimisation step. Loss terms are batch means; counts are batch sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub total: f64,
    pub terms: LossTerms,
    pub dcf_active: bool,
    pub pasted: usize,
    pub removed: usize,
    /// Whether every filtered mask stayed within its naive mask.
    pub mask_subset: bool,
    /// Share of target pixels whose pseudo label reached the threshold.
    pub confident_fraction: f64,
}

pub fn write_log(entries: &[TrainLogEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<TrainLogEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Arg-max labels plus confidence weights from class probabilities.
pub fn pseudo_label_from_probs(
    probs: &ProbMap,
    threshold: f64,
    mode: PseudoWeighting,
) -> Result<(LabelMap, Vec<f64>)> {
    let n = probs.width() * probs.height();
    let labels = (0..n).map(|px| probs.argmax(px).0).collect();
    let labels = LabelMap::new(probs.width(), probs.height(), probs.classes(), labels)?;
    Ok((labels, pseudo_weights(probs, threshold, mode)))
}

/// Pseudo labels for a target frame from the model's averaged heads;
/// pixels below `threshold` keep their label with weight 0.
pub fn pseudo_label(
    model: &ToyModel,
    target: &SceneSample,
    threshold: f64,
) -> Result<(LabelMap, Vec<f64>)> {
    let probs = model.probabilities(&model.forward(&extract(target.image()))?)?;
    pseudo_label_from_probs(&probs, threshold, PseudoWeighting::Hard)
}

pub fn predict(model: &ToyModel, sample: &SceneSample) -> Result<LabelMap> {
    let probs = model.probabilities(&model.forward(&extract(sample.image()))?)?;
    Ok(pseudo_label_from_probs(&probs, 1.0, PseudoWeighting::Hard)?.0)
}

pub fn evaluate(model: &ToyModel, corpus: &[SceneSample]) -> Result<EvalResult> {
    let mut m = ConfusionMatrix::new(model.classes);
    for s in corpus {
        m.add(s.labels(), &predict(model, s)?)?;
    }
    Ok(m.result())
}

fn check_corpora(source: &[SceneSample], target: &[SceneSample]) -> Result<(usize, usize, usize)> {
    let first = source
        .first()
        .ok_or_else(|| Error::Config("source corpus is empty".into()))?;
    if target.is_empty() {
        return Err(Error::Config("target corpus is empty".into()));
    }
    let shape = (first.width(), first.height(), first.labels().classes());
    for s in source.iter().chain(target) {
        let got = (s.width(), s.height(), s.labels().classes());
        if got != shape {
            return Err(Error::Config(format!(
                "sample {} is {}x{} with {} classes, expected {}x{} with {}",
                s.id(),
                got.0,
                got.1,
                got.2,
                shape.0,
                shape.1,
                shape.2
            )));
        }
    }
    Ok(shape)
}

/// Gradients of the two class heads for one labelled frame.
fn class_terms(
    model: &ToyModel,
    fwd: &Forward,
    labels: &LabelMap,
    weights: &[f64],
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let (hr, dhr) = cross_entropy_with_logit_grad(&fwd.hr_probs(model.classes)?, labels, weights)?;
    let (vis, dvis) =
        cross_entropy_with_logit_grad(&fwd.vis_probs(model.classes)?, labels, weights)?;
    Ok((hr.value, vis.value, dhr, dvis))
}

/// Runs self-training and returns the final model with one log entry per step.
pub fn train(
    config: &TrainConfig,
    source: &[SceneSample],
    target: &[SceneSample],
) -> Result<(ToyModel, Vec<TrainLogEntry>)> {
    config.validate()?;
    let (_, _, classes) = check_corpora(source, target)?;
    if config.dcf && config.thresholds.per_class().len() > classes {
        return Err(Error::Config(format!(
            "{} thresholds for {classes} classes",
            config.thresholds.per_class().len()
        )));
    }
    let source_features: Vec<Features> = source.iter().map(|s| extract(s.image())).collect();
    let target_features: Vec<Features> = target.iter().map(|s| extract(s.image())).collect();
    let mut model = ToyModel::new(
        classes,
        feature_stats(&source_features),
        config.seed,
        config.init_scale,
        config.afo.as_ref(),
    )?;

    let warmup = config.effective_warmup();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD1CE_5EED);
    let mut log = Vec::with_capacity(config.iterations);
    let scale = 1.0 / config.batch_size as f64;

    for step in 0..config.iterations {
        let dcf_active = config.dcf && step >= warmup;
        let mut grads = model.zeros_like();
        let mut terms = LossTerms::default();
        let (mut pasted, mut removed, mut confident) = (0usize, 0usize, 0.0);
        let mut mask_subset = true;

        for _ in 0..config.batch_size {
            let si = rng.random_range(0..source.len());
            let ti = rng.random_range(0..target.len());
            let mix_seed: u64 = rng.random();
            let (src, tgt) = (&source[si], &target[ti]);

            // supervised source terms
            let fwd = model.forward(&source_features[si])?;
            let ones = vec![1.0; src.pixel_count()];
            let (hr, vis, dhr, dvis) = class_terms(&model, &fwd, src.labels(), &ones)?;
            let (depth, mut ddepth) = berhu_with_grad(&fwd.depth, src.depth())?;
            ddepth.iter_mut().for_each(|g| *g *= config.lambda_depth);
            model.backward(&fwd, &dhr, &dvis, &ddepth, &mut grads)?;
            terms.hr_source += hr * scale;
            terms.vis_source += vis * scale;
            terms.depth_source += depth.value * scale;

            // pseudo-labelled target and the mixed frame
            let tfwd = model.forward(&target_features[ti])?;
            let probs = model.probabilities(&tfwd)?;
            let (plabels, pweights) =
                pseudo_label_from_probs(&probs, config.pseudo_threshold, config.pseudo_weighting)?;
            confident += pseudo_weights(&probs, config.pseudo_threshold, PseudoWeighting::Hard)
                .iter()
                .sum::<f64>()
                / tgt.pixel_count() as f64
                * scale;
            let pseudo_target = tgt.with_labels(plabels)?;

            let naive = build_mask(src.labels(), &select_classes(src.labels(), mix_seed)?);
            let mask: MixMask = if dcf_active {
                let (filtered, report) = dcf_filter(
                    &pseudo_target,
                    src,
                    &naive,
                    &config.binning,
                    &config.thresholds,
                    config.filter_mode,
                )?;
                removed += report.removed_total();
                mask_subset &= filtered.is_subset_of(&naive);
                filtered
            } else {
                naive.clone()
            };
            pasted += naive.count();

            let mixed = composite(src, &pseudo_target, &mask)?;
            let mixed_weights: Vec<f64> = mask
                .data()
                .iter()
                .zip(&pweights)
                .map(|(&m, &w)| if m { 1.0 } else { w })
                .collect();
            let mfwd = model.forward(&extract(mixed.image()))?;
            let (hr, vis, dhr, dvis) = class_terms(&model, &mfwd, mixed.labels(), &mixed_weights)?;
            let no_depth = vec![0.0; mixed.pixel_count()];
            model.backward(&mfwd, &dhr, &dvis, &no_depth, &mut grads)?;
            terms.hr_mixed += hr * scale;
            terms.vis_mixed += vis * scale;
        }

        model.add_scaled(&grads, -config.learning_rate * scale);
        if !model.all_finite() {
            return Err(Error::Config(format!(
                "parameters diverged at step {step}; lower the learning rate"
            )));
        }
        log.push(TrainLogEntry {
            step,
            total: total_loss(&terms, config.lambda_depth).value,
            terms,
            dcf_active,
            pasted,
            removed,
            mask_subset,
            confident_fraction: confident,
        });
    }
    Ok((model, log))
}
