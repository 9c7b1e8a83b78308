//! JSON pipeline configuration shared by the command-line tools.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dcf::{
    FilterMode, ThresholdTable, DEFAULT_STUFF_CLASSES, STUFF_THRESHOLD, THING_THRESHOLD,
};
use crate::depth_stats::{BinScale, DepthBinning};
use crate::error::{Error, Result};
use crate::harness::{AfoConfig, TrainConfig};
use crate::losses::{PseudoWeighting, DEFAULT_LAMBDA_DEPTH, DEFAULT_PSEUDO_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub n_bins: usize,
    pub d_max: f64,
    pub scale: BinScale,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            n_bins: 64,
            d_max: 80.0,
            scale: BinScale::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub stuff: f64,
    pub thing: f64,
    pub stuff_classes: BTreeSet<String>,
    /// Per-class values by name, applied last.
    pub overrides: BTreeMap<String, f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            stuff: STUFF_THRESHOLD,
            thing: THING_THRESHOLD,
            stuff_classes: DEFAULT_STUFF_CLASSES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iter: Option<usize>,
    pub pseudo_threshold: f64,
    pub pseudo_weighting: PseudoWeighting,
    pub lambda_depth: f64,
    pub dcf: bool,
    pub init_scale: f64,
    pub afo: Option<AfoConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 0.2,
            warmup_iter: None,
            pseudo_threshold: DEFAULT_PSEUDO_THRESHOLD,
            pseudo_weighting: PseudoWeighting::Hard,
            lambda_depth: DEFAULT_LAMBDA_DEPTH,
            dcf: true,
            init_scale: 0.01,
            afo: None,
        }
    }
}

/// Everything the CLI needs beyond the corpora themselves. Every field has
/// a default, so `{}` is a valid configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub binning: BinningConfig,
    pub thresholds: ThresholdConfig,
    pub filter_mode: FilterMode,
    pub train: TrainSection,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn binning(&self) -> Result<DepthBinning> {
        DepthBinning::new(self.binning.n_bins, self.binning.d_max, self.binning.scale)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Stuff/thing defaults by class name, then the named overrides.
    pub fn thresholds(&self, class_names: &[String]) -> Result<ThresholdTable> {
        let t = &self.thresholds;
        let per_class = class_names
            .iter()
            .map(|n| {
                if t.stuff_classes.contains(n) {
                    t.stuff
                } else {
                    t.thing
                }
            })
            .collect();
        let mut table =
            ThresholdTable::new(per_class, t.thing).map_err(|e| Error::Config(e.to_string()))?;
        for (name, &tau) in &t.overrides {
            table.set_named(class_names, name, tau)?;
        }
        Ok(table)
    }

    pub fn train_config(&self, class_names: &[String]) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_iter: t.warmup_iter,
            pseudo_threshold: t.pseudo_threshold,
            pseudo_weighting: t.pseudo_weighting,
            lambda_depth: t.lambda_depth,
            dcf: t.dcf,
            filter_mode: self.filter_mode,
            thresholds: self.thresholds(class_names)?,
            binning: self.binning()?,
            seed: self.seed,
            init_scale: t.init_scale,
            afo: t.afo,
        };
        config.validate()?;
        Ok(config)
    }
}
