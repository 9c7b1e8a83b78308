//! Attention-gated fusion of visual and depth feature maps.
//!
//! One fusion step concatenates the two maps along channels, runs the
//! result through pre-norm single-head transformer blocks (every pixel is a
//! token), projects it with a 1×1 convolution to a single-channel sigmoid
//! gate, and multiplies that gate back into both input maps. Repeating the
//! step feeds the gated maps back in.
//!
//! [`FusionTape`] records a forward pass so that gradients with respect to
//! the parameters and both inputs can be computed analytically;
//! [`grad_check`] compares them with central differences.

mod block;
pub mod params;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use block::{block_backward, block_forward, BlockCache};
pub use block::{gelu, LAYER_NORM_EPS};
pub use params::{BlockParams, CheckpointLayout, FusionParams, TensorInfo, MLP_RATIO};

/// Epsilon of the per-channel standardization applied before fusion.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Dense `channels × height × width` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::from_array(data)
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature values must be finite".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[[c, y, x]]
    }

    /// `(height·width) × channels`, row-major over pixels.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .to_shape((c, h * w))
            .expect("contiguous feature map")
            .t()
            .to_owned()
    }

    pub fn from_tokens(tokens: &Array2<f64>, height: usize, width: usize) -> Self {
        let c = tokens.ncols();
        let data = tokens
            .t()
            .as_standard_layout()
            .to_shape((c, height, width))
            .expect("token count matches spatial size")
            .to_owned();
        Self { data }
    }
}

/// Single-channel spatial gate with values in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    data: Array2<f64>,
}

impl GateMap {
    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[[y, x]]
    }

    /// A constant gate; any finite value is accepted so that the limit
    /// cases 0 and 1 can be exercised directly.
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((height, width), value),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-channel zero-mean, unit-variance standardization over space.
pub fn standardize(f: &FeatureMap) -> FeatureMap {
    let mut data = f.data.clone();
    for mut ch in data.outer_iter_mut() {
        let n = ch.len() as f64;
        let mean = ch.sum() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + BATCH_NORM_EPS).sqrt();
        ch.mapv_inplace(|v| (v - mean) * r);
    }
    FeatureMap { data }
}

fn check_spatial(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Visual channels followed by depth channels.
pub fn fuse_concat(f_vis: &FeatureMap, f_depth: &FeatureMap) -> Result<FeatureMap> {
    check_spatial(
        (f_vis.height(), f_vis.width()),
        (f_depth.height(), f_depth.width()),
        "fuse_concat",
    )?;
    let data = concatenate(Axis(0), &[f_vis.data.view(), f_depth.data.view()])
        .expect("spatial dims checked");
    Ok(FeatureMap { data })
}

fn check_dim(channels: usize, params: &FusionParams) -> Result<()> {
    if channels != params.dim {
        return Err(Error::ShapeMismatch(format!(
            "fused map has {channels} channels, parameters expect {}",
            params.dim
        )));
    }
    Ok(())
}

fn run_blocks(tokens: Array2<f64>, params: &FusionParams) -> (Array2<f64>, Vec<BlockCache>) {
    let mut x = tokens;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (y, cache) = block_forward(&x, block);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

/// Runs the transformer blocks over the fused map's pixel tokens.
pub fn attention_fuse(f_fuse_in: &FeatureMap, params: &FusionParams) -> Result<FeatureMap> {
    check_dim(f_fuse_in.channels(), params)?;
    let (out, _) = run_blocks(f_fuse_in.to_tokens(), params);
    Ok(FeatureMap::from_tokens(
        &out,
        f_fuse_in.height(),
        f_fuse_in.width(),
    ))
}

fn gate_tokens(tokens: &Array2<f64>, params: &FusionParams) -> Array1<f64> {
    let b = params.conv_bias[0];
    tokens.dot(&params.conv_weight).mapv(|z| sigmoid(z + b))
}

/// 1×1 convolution to one channel followed by a sigmoid.
pub fn gate(f_fuse_out: &FeatureMap, params: &FusionParams) -> Result<GateMap> {
    check_dim(f_fuse_out.channels(), params)?;
    let g = gate_tokens(&f_fuse_out.to_tokens(), params);
    let data = g
        .into_shape_with_order((f_fuse_out.height(), f_fuse_out.width()))
        .expect("token count matches spatial size");
    Ok(GateMap { data })
}

/// Multiplies the gate into every channel of both maps.
pub fn apply_gate(
    f_vis: &FeatureMap,
    f_depth: &FeatureMap,
    gamma: &GateMap,
) -> Result<(FeatureMap, FeatureMap)> {
    let g = (gamma.height(), gamma.width());
    check_spatial((f_vis.height(), f_vis.width()), g, "apply_gate visual")?;
    check_spatial((f_depth.height(), f_depth.width()), g, "apply_gate depth")?;
    let scale = |f: &FeatureMap| FeatureMap {
        data: &f.data * &gamma.data.view().insert_axis(Axis(0)),
    };
    Ok((scale(f_vis), scale(f_depth)))
}

/// `iterations` chained fusion steps sharing one parameter set.
pub fn multimodal_communicate(
    f_vis: &FeatureMap,
    f_depth: &FeatureMap,
    params: &FusionParams,
    iterations: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    let (v, d, _) = FusionTape::record(f_vis, f_depth, params, iterations)?;
    Ok((v, d))
}

struct StepCache {
    vis: Array2<f64>,
    depth: Array2<f64>,
    blocks: Vec<BlockCache>,
    fused_out: Array2<f64>,
    gate: Array1<f64>,
}

/// Recorded forward pass of [`multimodal_communicate`].
pub struct FusionTape {
    steps: Vec<StepCache>,
    height: usize,
    width: usize,
}

impl FusionTape {
    pub fn record(
        f_vis: &FeatureMap,
        f_depth: &FeatureMap,
        params: &FusionParams,
        iterations: usize,
    ) -> Result<(FeatureMap, FeatureMap, FusionTape)> {
        if iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".into(),
            ));
        }
        check_spatial(
            (f_vis.height(), f_vis.width()),
            (f_depth.height(), f_depth.width()),
            "multimodal_communicate",
        )?;
        check_dim(f_vis.channels() + f_depth.channels(), params)?;
        let (h, w) = (f_vis.height(), f_vis.width());
        let mut vis = f_vis.to_tokens();
        let mut depth = f_depth.to_tokens();
        let mut steps = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let fused = concatenate(Axis(1), &[vis.view(), depth.view()]).unwrap();
            let (fused_out, blocks) = run_blocks(fused, params);
            let gate = gate_tokens(&fused_out, params);
            let col = gate.view().insert_axis(Axis(1));
            let next_vis = &vis * &col;
            let next_depth = &depth * &col;
            steps.push(StepCache {
                vis,
                depth,
                blocks,
                fused_out,
                gate,
            });
            vis = next_vis;
            depth = next_depth;
        }
        let tape = FusionTape {
            steps,
            height: h,
            width: w,
        };
        Ok((
            FeatureMap::from_tokens(&vis, h, w),
            FeatureMap::from_tokens(&depth, h, w),
            tape,
        ))
    }

    /// Gradients of a scalar loss with respect to both inputs, given its
    /// gradients with respect to both outputs. Parameter gradients are
    /// added into `grads`.
    pub fn backward(
        &self,
        d_vis_out: &FeatureMap,
        d_depth_out: &FeatureMap,
        params: &FusionParams,
        grads: &mut FusionParams,
    ) -> (FeatureMap, FeatureMap) {
        let mut dvis = d_vis_out.to_tokens();
        let mut ddepth = d_depth_out.to_tokens();
        let cv = dvis.ncols();
        for step in self.steps.iter().rev() {
            let g = &step.gate;
            let col = g.view().insert_axis(Axis(1));
            let dgate: Array1<f64> =
                (&dvis * &step.vis).sum_axis(Axis(1)) + (&ddepth * &step.depth).sum_axis(Axis(1));
            let mut dvis_in = &dvis * &col;
            let mut ddepth_in = &ddepth * &col;

            let dz: Array1<f64> = &dgate * &g.mapv(|v| v * (1.0 - v));
            grads.conv_weight += &step.fused_out.t().dot(&dz);
            grads.conv_bias[0] += dz.sum();
            let mut dx = dz
                .view()
                .insert_axis(Axis(1))
                .dot(&params.conv_weight.view().insert_axis(Axis(0)));
            for ((cache, p), gp) in step
                .blocks
                .iter()
                .zip(&params.blocks)
                .zip(grads.blocks.iter_mut())
                .rev()
            {
                dx = block_backward(&dx, cache, p, gp);
            }
            dvis_in += &dx.slice(s![.., ..cv]);
            ddepth_in += &dx.slice(s![.., cv..]);
            dvis = dvis_in;
            ddepth = ddepth_in;
        }
        (
            FeatureMap::from_tokens(&dvis, self.height, self.width),
            FeatureMap::from_tokens(&ddepth, self.height, self.width),
        )
    }
}

/// Scalar objective placed on top of the fusion outputs for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    /// Sum of squares of every output value.
    SumOfSquares,
    /// Constant zero.
    Zero,
}

impl LossHead {
    fn value(&self, vis: &FeatureMap, depth: &FeatureMap) -> f64 {
        match self {
            LossHead::SumOfSquares => {
                vis.data.iter().map(|v| v * v).sum::<f64>()
                    + depth.data.iter().map(|v| v * v).sum::<f64>()
            }
            LossHead::Zero => 0.0,
        }
    }

    fn grad(&self, out: &FeatureMap) -> FeatureMap {
        match self {
            LossHead::SumOfSquares => FeatureMap {
                data: out.data.mapv(|v| 2.0 * v),
            },
            LossHead::Zero => FeatureMap {
                data: Array3::zeros(out.data.raw_dim()),
            },
        }
    }
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;

/// Relative errors are measured against at least this magnitude, so that
/// gradients which are zero up to rounding compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per tensor, inputs included as `input.vis` and
    /// `input.depth`.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
}

/// Analytic gradients from [`FusionTape`] alongside their values.
pub struct AnalyticGrads {
    pub loss: f64,
    pub params: FusionParams,
    pub vis: FeatureMap,
    pub depth: FeatureMap,
}

pub fn analytic_grads(
    params: &FusionParams,
    f_vis: &FeatureMap,
    f_depth: &FeatureMap,
    iterations: usize,
    head: LossHead,
) -> Result<AnalyticGrads> {
    let (v, d, tape) = FusionTape::record(f_vis, f_depth, params, iterations)?;
    let mut grads = params.zeros_like();
    let (gv, gd) = tape.backward(&head.grad(&v), &head.grad(&d), params, &mut grads);
    Ok(AnalyticGrads {
        loss: head.value(&v, &d),
        params: grads,
        vis: gv,
        depth: gd,
    })
}

/// Compares analytic gradients of `head` on the fusion outputs against
/// central differences, over every parameter and every input value.
pub fn grad_check(
    params: &FusionParams,
    f_vis: &FeatureMap,
    f_depth: &FeatureMap,
    iterations: usize,
    head: LossHead,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(params, f_vis, f_depth, iterations, head)?;
    let eval = |p: &FusionParams, v: &FeatureMap, d: &FeatureMap| -> f64 {
        let (ov, od) = multimodal_communicate(v, d, p, iterations).expect("shapes already checked");
        head.value(&ov, &od)
    };

    let mut per_tensor = Vec::new();
    let mut checked = 0;

    let flat = params.to_flat();
    let grad_flat = analytic.params.to_flat();
    let mut probe = params.clone();
    for info in params.layout().tensors {
        let len: usize = info.shape.iter().product();
        let mut worst: f64 = 0.0;
        for i in info.offset..info.offset + len {
            let mut x = flat.clone();
            x[i] = flat[i] + FD_STEP;
            probe.set_flat(&x)?;
            let up = eval(&probe, f_vis, f_depth);
            x[i] = flat[i] - FD_STEP;
            probe.set_flat(&x)?;
            let down = eval(&probe, f_vis, f_depth);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad_flat[i], numeric));
            checked += 1;
        }
        per_tensor.push((info.name, worst));
    }

    for (name, which) in [("input.vis", 0), ("input.depth", 1)] {
        let base = if which == 0 { f_vis } else { f_depth };
        let grad = if which == 0 {
            &analytic.vis
        } else {
            &analytic.depth
        };
        let mut worst: f64 = 0.0;
        for (idx, &g) in grad.data.indexed_iter() {
            let mut up = base.clone();
            up.data[idx] += FD_STEP;
            let mut down = base.clone();
            down.data[idx] -= FD_STEP;
            let (fu, fd) = if which == 0 {
                (eval(params, &up, f_depth), eval(params, &down, f_depth))
            } else {
                (eval(params, f_vis, &up), eval(params, f_vis, &down))
            };
            worst = worst.max(relative_error(g, (fu - fd) / (2.0 * FD_STEP)));
            checked += 1;
        }
        per_tensor.push((name.to_string(), worst));
    }

    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        checked,
    })
}
