use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MLP hidden width as a multiple of the token dimension.
pub const MLP_RATIO: usize = 4;

/// One pre-norm transformer block over `dim`-wide tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

impl BlockParams {
    /// Unit layer-norm gains, everything else zero: the block is an identity.
    pub fn identity(dim: usize) -> Self {
        let hidden = dim * MLP_RATIO;
        Self {
            ln1_gain: Array1::ones(dim),
            ln1_bias: Array1::zeros(dim),
            w_query: Array2::zeros((dim, dim)),
            w_key: Array2::zeros((dim, dim)),
            w_value: Array2::zeros((dim, dim)),
            ln2_gain: Array1::ones(dim),
            ln2_bias: Array1::zeros(dim),
            mlp_w1: Array2::zeros((dim, hidden)),
            mlp_b1: Array1::zeros(hidden),
            mlp_w2: Array2::zeros((hidden, dim)),
            mlp_b2: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        let mut b = Self::identity(dim);
        b.ln1_gain.fill(0.0);
        b.ln2_gain.fill(0.0);
        b
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 11] {
        [
            ("ln1_gain", self.ln1_gain.as_slice_mut().unwrap()),
            ("ln1_bias", self.ln1_bias.as_slice_mut().unwrap()),
            ("w_query", self.w_query.as_slice_mut().unwrap()),
            ("w_key", self.w_key.as_slice_mut().unwrap()),
            ("w_value", self.w_value.as_slice_mut().unwrap()),
            ("ln2_gain", self.ln2_gain.as_slice_mut().unwrap()),
            ("ln2_bias", self.ln2_bias.as_slice_mut().unwrap()),
            ("mlp_w1", self.mlp_w1.as_slice_mut().unwrap()),
            ("mlp_b1", self.mlp_b1.as_slice_mut().unwrap()),
            ("mlp_w2", self.mlp_w2.as_slice_mut().unwrap()),
            ("mlp_b2", self.mlp_b2.as_slice_mut().unwrap()),
        ]
    }

    fn shapes(&self) -> [Vec<usize>; 11] {
        [
            self.ln1_gain.shape().to_vec(),
            self.ln1_bias.shape().to_vec(),
            self.w_query.shape().to_vec(),
            self.w_key.shape().to_vec(),
            self.w_value.shape().to_vec(),
            self.ln2_gain.shape().to_vec(),
            self.ln2_bias.shape().to_vec(),
            self.mlp_w1.shape().to_vec(),
            self.mlp_b1.shape().to_vec(),
            self.mlp_w2.shape().to_vec(),
            self.mlp_b2.shape().to_vec(),
        ]
    }
}

/// Transformer blocks plus the 1×1 convolution producing the gate logit.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub dim: usize,
    pub blocks: Vec<BlockParams>,
    pub conv_weight: Array1<f64>,
    /// Length-1 array so every tensor is visited the same way.
    pub conv_bias: Array1<f64>,
}

/// Name, shape and flat offset of one tensor in the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointLayout {
    pub dtype: String,
    pub dim: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub tensors: Vec<TensorInfo>,
}

impl FusionParams {
    /// Identity blocks and a zero gate convolution, so the gate is 0.5 everywhere.
    pub fn identity(dim: usize, blocks: usize) -> Self {
        Self {
            dim,
            blocks: (0..blocks).map(|_| BlockParams::identity(dim)).collect(),
            conv_weight: Array1::zeros(dim),
            conv_bias: Array1::zeros(1),
        }
    }

    /// All-zero tensors with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            blocks: (0..self.blocks.len())
                .map(|_| BlockParams::zeros(self.dim))
                .collect(),
            conv_weight: Array1::zeros(self.dim),
            conv_bias: Array1::zeros(1),
        }
    }

    /// Gaussian weights scaled by `scale / sqrt(fan_in)`; layer-norm gains
    /// around 1 and biases around 0 with the same spread.
    pub fn random(dim: usize, blocks: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut p = Self::identity(dim, blocks);
        let hidden = dim * MLP_RATIO;
        p.visit_mut(|name, values| {
            let (centre, spread) = match name.rsplit('.').next().unwrap() {
                "ln1_gain" | "ln2_gain" => (1.0, 0.1 * scale),
                "ln1_bias" | "ln2_bias" | "mlp_b1" | "mlp_b2" | "conv_bias" => (0.0, 0.1 * scale),
                "mlp_w2" => (0.0, scale / (hidden as f64).sqrt()),
                _ => (0.0, scale / (dim as f64).sqrt()),
            };
            for v in values.iter_mut() {
                *v = centre + spread * normal.sample(&mut rng);
            }
        });
        p
    }

    /// Visits every tensor in checkpoint order with a dotted name.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (name, values) in block.tensors_mut() {
                f(&format!("blocks.{b}.{name}"), values);
            }
        }
        f("conv_weight", self.conv_weight.as_slice_mut().unwrap());
        f("conv_bias", self.conv_bias.as_slice_mut().unwrap());
    }

    pub fn layout(&self) -> CheckpointLayout {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
            });
            offset += len;
        };
        let names = [
            "ln1_gain", "ln1_bias", "w_query", "w_key", "w_value", "ln2_gain", "ln2_bias",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, shape) in names.iter().zip(block.shapes()) {
                push(format!("blocks.{b}.{name}"), shape);
            }
        }
        push("conv_weight".into(), vec![self.dim]);
        push("conv_bias".into(), vec![1]);
        CheckpointLayout {
            dtype: "f32-le".into(),
            dim: self.dim,
            blocks: self.blocks.len(),
            mlp_ratio: MLP_RATIO,
            tensors,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit_mut(|_, v| out.extend_from_slice(v));
        out
    }

    pub fn len(&self) -> usize {
        self.layout()
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut at = 0;
        self.visit_mut(|_, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &FusionParams, scale: f64) {
        let flat = other.to_flat();
        let mut at = 0;
        self.visit_mut(|_, v| {
            for x in v.iter_mut() {
                *x += scale * flat[at];
                at += 1;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Writes the flat little-endian f32 file at `path` and its JSON layout
    /// next to it (same name, `.json` extension).
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .to_flat()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.layout())?;
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = path.with_extension("json");
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let layout: CheckpointLayout = serde_json::from_str(&text)?;
        if layout.dtype != "f32-le" || layout.mlp_ratio != MLP_RATIO {
            return Err(Error::Config(format!(
                "unsupported checkpoint layout {} / ratio {}",
                layout.dtype, layout.mlp_ratio
            )));
        }
        let mut params = Self::identity(layout.dim, layout.blocks);
        if params.layout() != layout {
            return Err(Error::Config(
                "checkpoint tensor table does not match".into(),
            ));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Config(
                "checkpoint length is not a multiple of 4".into(),
            ));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        params.set_flat(&flat)?;
        Ok(params)
    }
}
