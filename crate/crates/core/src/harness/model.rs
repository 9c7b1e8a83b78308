//! Per-pixel linear segmentation model with two class heads and a depth
//! head, optionally routing the second head through attention-gated fusion.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{Features, N_FEATURES};
use crate::afo::{FeatureMap, FusionParams, FusionTape};
use crate::error::{Error, Result};
use crate::losses::ProbMap;

/// Dense layer applied independently at every pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub outputs: usize,
    pub inputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    fn random(outputs: usize, inputs: usize, rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let mut head = Self::zeros(outputs, inputs);
        for w in &mut head.weights {
            *w = normal.sample(rng);
        }
        head
    }

    /// `x` is `n × inputs`; the result is `outputs × n`.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs * n];
        for o in 0..self.outputs {
            let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let b = self.bias[o];
            for (px, slot) in out[o * n..(o + 1) * n].iter_mut().enumerate() {
                let row = &x[px * self.inputs..(px + 1) * self.inputs];
                *slot = b + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates parameter gradients and, when asked, the input gradient
    /// (`n × inputs`).
    pub fn backward(
        &self,
        x: &[f64],
        n: usize,
        dout: &[f64],
        grad: &mut LinearHead,
        mut dx: Option<&mut [f64]>,
    ) {
        for o in 0..self.outputs {
            let d = &dout[o * n..(o + 1) * n];
            let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let gw = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut gb = 0.0;
            for (px, &g) in d.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb += g;
                let row = &x[px * self.inputs..(px + 1) * self.inputs];
                for (acc, &v) in gw.iter_mut().zip(row) {
                    *acc += g * v;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let drow = &mut dx[px * self.inputs..(px + 1) * self.inputs];
                    for (acc, &wv) in drow.iter_mut().zip(w) {
                        *acc += g * wv;
                    }
                }
            }
            grad.bias[o] += gb;
        }
    }

    fn add_scaled(&mut self, other: &LinearHead, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Fusion settings for the optional attention path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfoConfig {
    /// Side of the square pixel windows attention runs within.
    pub window: usize,
    pub blocks: usize,
    pub iterations: usize,
    pub init_scale: f64,
}

impl Default for AfoConfig {
    fn default() -> Self {
        Self {
            window: 4,
            blocks: 1,
            iterations: 1,
            init_scale: 0.1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AfoRecord {
    window: usize,
    iterations: usize,
    blocks: usize,
    projection: LinearHead,
    params: Vec<f64>,
}

/// The fusion path: a learned projection provides the depth-branch
/// features, which are fused with the image features window by window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AfoRecord", into = "AfoRecord")]
pub struct AfoModule {
    pub window: usize,
    pub iterations: usize,
    pub projection: LinearHead,
    pub params: FusionParams,
}

impl TryFrom<AfoRecord> for AfoModule {
    type Error = Error;

    fn try_from(r: AfoRecord) -> Result<Self> {
        let mut params = FusionParams::identity(2 * N_FEATURES, r.blocks);
        params.set_flat(&r.params)?;
        Ok(Self {
            window: r.window,
            iterations: r.iterations,
            projection: r.projection,
            params,
        })
    }
}

impl From<AfoModule> for AfoRecord {
    fn from(m: AfoModule) -> Self {
        AfoRecord {
            window: m.window,
            iterations: m.iterations,
            blocks: m.params.blocks.len(),
            params: m.params.to_flat(),
            projection: m.projection,
        }
    }
}

impl AfoModule {
    fn windows(&self, width: usize, height: usize) -> Vec<(usize, usize, usize, usize)> {
        let s = self.window.max(1);
        let mut out = Vec::new();
        for y0 in (0..height).step_by(s) {
            for x0 in (0..width).step_by(s) {
                out.push((x0, y0, (x0 + s).min(width), (y0 + s).min(height)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub classes: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub hr: LinearHead,
    pub vis: LinearHead,
    pub depth: LinearHead,
    pub afo: Option<AfoModule>,
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub width: usize,
    pub height: usize,
    /// Channel-major logits of the two class heads.
    pub hr_logits: Vec<f64>,
    pub vis_logits: Vec<f64>,
    pub depth: Vec<f64>,
    x: Vec<f64>,
    vis_input: Vec<f64>,
    depth_input: Vec<f64>,
    tapes: Vec<((usize, usize, usize, usize), FusionTape)>,
}

impl Forward {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn hr_probs(&self, classes: usize) -> Result<ProbMap> {
        ProbMap::from_logits(classes, self.width, self.height, &self.hr_logits)
    }

    pub fn vis_probs(&self, classes: usize) -> Result<ProbMap> {
        ProbMap::from_logits(classes, self.width, self.height, &self.vis_logits)
    }
}

/// Per-feature mean and standard deviation over every pixel of `features`.
pub fn feature_stats<'a>(features: impl IntoIterator<Item = &'a Features>) -> (Vec<f64>, Vec<f64>) {
    let mut sum = [0.0; N_FEATURES];
    let mut sq = [0.0; N_FEATURES];
    let mut n = 0usize;
    for f in features {
        for row in f.data.chunks_exact(N_FEATURES) {
            for k in 0..N_FEATURES {
                sum[k] += row[k];
                sq[k] += row[k] * row[k];
            }
        }
        n += f.pixels();
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = (0..N_FEATURES)
        .map(|k| (sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

fn tokens(
    values: &[f64],
    rect: (usize, usize, usize, usize),
    width: usize,
    row_major: bool,
    n: usize,
) -> FeatureMap {
    let (x0, y0, x1, y1) = rect;
    let (w, h) = (x1 - x0, y1 - y0);
    let mut data = vec![0.0; N_FEATURES * w * h];
    for c in 0..N_FEATURES {
        for y in 0..h {
            for x in 0..w {
                let px = (y0 + y) * width + x0 + x;
                data[(c * h + y) * w + x] = if row_major {
                    values[px * N_FEATURES + c]
                } else {
                    values[c * n + px]
                };
            }
        }
    }
    FeatureMap::new(N_FEATURES, h, w, data).expect("window sized consistently")
}

impl ToyModel {
    /// Small random heads; `afo` adds the fusion path.
    pub fn new(
        classes: usize,
        stats: (Vec<f64>, Vec<f64>),
        seed: u64,
        init_scale: f64,
        afo: Option<&AfoConfig>,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = LinearHead::random(classes, N_FEATURES, &mut rng, init_scale);
        let vis = LinearHead::random(classes, N_FEATURES, &mut rng, init_scale);
        let depth = LinearHead::zeros(1, N_FEATURES);
        let afo = match afo {
            None => None,
            Some(cfg) => {
                if cfg.window == 0 || cfg.iterations == 0 {
                    return Err(Error::Config(
                        "afo window and iterations must be positive".into(),
                    ));
                }
                let mut projection =
                    LinearHead::random(N_FEATURES, N_FEATURES, &mut rng, init_scale);
                for k in 0..N_FEATURES {
                    projection.weights[k * N_FEATURES + k] += 1.0;
                }
                let params = FusionParams::random(
                    2 * N_FEATURES,
                    cfg.blocks,
                    seed.wrapping_add(1),
                    cfg.init_scale,
                );
                Some(AfoModule {
                    window: cfg.window,
                    iterations: cfg.iterations,
                    projection,
                    params,
                })
            }
        };
        Ok(Self {
            classes,
            feature_mean: stats.0,
            feature_std: stats.1,
            hr,
            vis,
            depth,
            afo,
        })
    }

    /// A same-shaped model with every parameter zero, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            classes: self.classes,
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
            hr: LinearHead::zeros(self.hr.outputs, self.hr.inputs),
            vis: LinearHead::zeros(self.vis.outputs, self.vis.inputs),
            depth: LinearHead::zeros(1, N_FEATURES),
            afo: self.afo.as_ref().map(|a| AfoModule {
                window: a.window,
                iterations: a.iterations,
                projection: LinearHead::zeros(N_FEATURES, N_FEATURES),
                params: a.params.zeros_like(),
            }),
        }
    }

    /// `self += scale · other` over trainable parameters.
    pub fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        self.hr.add_scaled(&other.hr, scale);
        self.vis.add_scaled(&other.vis, scale);
        self.depth.add_scaled(&other.depth, scale);
        if let (Some(a), Some(b)) = (self.afo.as_mut(), other.afo.as_ref()) {
            a.projection.add_scaled(&b.projection, scale);
            a.params.add_scaled(&b.params, scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.hr.all_finite()
            && self.vis.all_finite()
            && self.depth.all_finite()
            && self
                .afo
                .as_ref()
                .is_none_or(|a| a.projection.all_finite() && a.params.all_finite())
    }

    pub fn normalize(&self, f: &Features) -> Vec<f64> {
        f.data
            .chunks_exact(N_FEATURES)
            .flat_map(|row| {
                (0..N_FEATURES).map(move |k| (row[k] - self.feature_mean[k]) / self.feature_std[k])
            })
            .collect()
    }

    pub fn forward(&self, f: &Features) -> Result<Forward> {
        let n = f.pixels();
        let x = self.normalize(f);
        let hr_logits = self.hr.forward(&x, n);
        let mut tapes = Vec::new();
        let (vis_input, depth_input) = match &self.afo {
            None => (x.clone(), x.clone()),
            Some(afo) => {
                // channel-major projection, then back to row-major for the heads
                let proj = afo.projection.forward(&x, n);
                let mut depth_rows = vec![0.0; n * N_FEATURES];
                for c in 0..N_FEATURES {
                    for px in 0..n {
                        depth_rows[px * N_FEATURES + c] = proj[c * n + px];
                    }
                }
                let mut vis = vec![0.0; n * N_FEATURES];
                for rect in afo.windows(f.width, f.height) {
                    let fv = tokens(&x, rect, f.width, true, n);
                    let fd = tokens(&proj, rect, f.width, false, n);
                    let (out, _, tape) = FusionTape::record(&fv, &fd, &afo.params, afo.iterations)?;
                    let (x0, y0, x1, y1) = rect;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let px = y * f.width + xx;
                            for c in 0..N_FEATURES {
                                vis[px * N_FEATURES + c] = out.get(c, y - y0, xx - x0);
                            }
                        }
                    }
                    tapes.push((rect, tape));
                }
                (vis, depth_rows)
            }
        };
        let vis_logits = self.vis.forward(&vis_input, n);
        let depth = self.depth.forward(&depth_input, n);
        Ok(Forward {
            width: f.width,
            height: f.height,
            hr_logits,
            vis_logits,
            depth,
            x,
            vis_input,
            depth_input,
            tapes,
        })
    }

    /// Mean of the two heads' class probabilities.
    pub fn probabilities(&self, fwd: &Forward) -> Result<ProbMap> {
        let hr = fwd.hr_probs(self.classes)?;
        let vis = fwd.vis_probs(self.classes)?;
        ProbMap::average(&[&hr, &vis])
    }

    /// Accumulates into `grads` the parameter gradients of a loss whose
    /// gradients with respect to the logits and depth predictions are given.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_hr: &[f64],
        d_vis: &[f64],
        d_depth: &[f64],
        grads: &mut ToyModel,
    ) -> Result<()> {
        let n = fwd.pixels();
        self.hr.backward(&fwd.x, n, d_hr, &mut grads.hr, None);
        let Some(afo) = &self.afo else {
            self.vis
                .backward(&fwd.vis_input, n, d_vis, &mut grads.vis, None);
            self.depth
                .backward(&fwd.depth_input, n, d_depth, &mut grads.depth, None);
            return Ok(());
        };
        let g_afo = grads
            .afo
            .as_mut()
            .ok_or_else(|| Error::Config("gradient buffer lacks the fusion path".into()))?;
        let mut dvis_rows = vec![0.0; n * N_FEATURES];
        self.vis.backward(
            &fwd.vis_input,
            n,
            d_vis,
            &mut grads.vis,
            Some(&mut dvis_rows),
        );
        let mut dproj_rows = vec![0.0; n * N_FEATURES];
        self.depth.backward(
            &fwd.depth_input,
            n,
            d_depth,
            &mut grads.depth,
            Some(&mut dproj_rows),
        );
        let zero_depth = |h: usize, w: usize| FeatureMap::zeros(N_FEATURES, h, w);
        for (rect, tape) in &fwd.tapes {
            let (x0, y0, x1, y1) = *rect;
            let dv = tokens(&dvis_rows, *rect, fwd.width, true, n);
            let (_, dd) = tape.backward(
                &dv,
                &zero_depth(y1 - y0, x1 - x0),
                &afo.params,
                &mut g_afo.params,
            );
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = y * fwd.width + x;
                    for c in 0..N_FEATURES {
                        dproj_rows[px * N_FEATURES + c] += dd.get(c, y - y0, x - x0);
                    }
                }
            }
        }
        let mut dproj = vec![0.0; n * N_FEATURES];
        for px in 0..n {
            for c in 0..N_FEATURES {
                dproj[c * n + px] = dproj_rows[px * N_FEATURES + c];
            }
        }
        afo.projection
            .backward(&fwd.x, n, &dproj, &mut g_afo.projection, None);
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ToyModel = serde_json::from_str(&text)?;
        if model.feature_mean.len() != N_FEATURES || model.feature_std.len() != N_FEATURES {
            return Err(Error::Config(format!(
                "{}: expected {N_FEATURES} feature statistics",
                path.display()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::features::extract;
    use crate::scene::Image;

    fn image(seed: u8) -> Image {
        let data = (0..6 * 5 * 3)
            .map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed))
            .collect();
        Image::new(6, 5, data).unwrap()
    }

    fn loss_and_grad(model: &ToyModel, f: &Features) -> (f64, ToyModel) {
        // sum of squared outputs weighted by fixed coefficients
        let fwd = model.forward(f).unwrap();
        let coef = |i: usize| ((i * 7919) % 13) as f64 / 13.0 - 0.4;
        let mut loss = 0.0;
        let mut grads = model.zeros_like();
        let mut d = |v: &[f64], off: usize| {
            v.iter()
                .enumerate()
                .map(|(i, &a)| {
                    loss += coef(i + off) * a * a;
                    2.0 * coef(i + off) * a
                })
                .collect::<Vec<_>>()
        };
        let dh = d(&fwd.hr_logits, 0);
        let dv = d(&fwd.vis_logits, 1000);
        let dd = d(&fwd.depth, 2000);
        model.backward(&fwd, &dh, &dv, &dd, &mut grads).unwrap();
        (loss, grads)
    }

    #[test]
    fn fusion_path_gradients_match_differences() {
        let f = extract(&image(3));
        let stats = feature_stats([&f]);
        let cfg = AfoConfig {
            window: 4,
            blocks: 1,
            iterations: 2,
            init_scale: 0.5,
        };
        let mut model = ToyModel::new(3, stats, 5, 0.3, Some(&cfg)).unwrap();
        model.depth = LinearHead::random(1, N_FEATURES, &mut ChaCha8Rng::seed_from_u64(9), 0.3);
        let (_, grads) = loss_and_grad(&model, &f);

        let h = 1e-6;
        let mut checked = 0;
        for probe in [0usize, 3, 11] {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let bump = |m: &mut ToyModel, s: f64| {
                let a = m.afo.as_mut().unwrap();
                let mut flat = a.params.to_flat();
                flat[probe * 17] += s;
                a.params.set_flat(&flat).unwrap();
                a.projection.weights[probe] += s;
            };
            bump(&mut plus, h);
            bump(&mut minus, -h);
            let ga = grads.afo.as_ref().unwrap();
            let analytic = ga.params.to_flat()[probe * 17] + ga.projection.weights[probe];
            let numeric = (loss_and_grad(&plus, &f).0 - loss_and_grad(&minus, &f).0) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-5, "probe {probe}: {analytic} vs {numeric}");
            checked += 1;
        }
        assert_eq!(checked, 3);
    }

    #[test]
    fn json_round_trip_with_fusion() {
        let f = extract(&image(1));
        let model =
            ToyModel::new(2, feature_stats([&f]), 1, 0.1, Some(&AfoConfig::default())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save_json(&path).unwrap();
        assert_eq!(ToyModel::load_json(&path).unwrap(), model);
    }
}
