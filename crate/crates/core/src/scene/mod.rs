//! Frame-level domain types: RGB image, label map, depth map, and the
//! binary paste mask, plus PNG and manifest I/O in [`io`].
//!
//! All planes are row-major. Labels use `255` as the ignore value and depth
//! uses `0.0` metres as the invalid sentinel; both are skipped by every
//! statistic and loss in this crate.

pub mod io;

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub use io::{
    load_sample, read_image_png, read_mask_png, save_mask_png, save_sample, write_image_png,
    CorpusManifest, ManifestEntry, Role,
};

/// Label value excluded from statistics, masks and losses.
pub const IGNORE: u8 = 255;

/// Depth value marking a pixel without a valid measurement.
pub const INVALID_DEPTH: f64 = 0.0;

fn check_len(what: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::DimensionMismatch(format!(
            "{what}: data length {len} != expected {expected}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        check_len("label map", data.len(), width * height)?;
        if classes == 0 || classes > IGNORE as usize {
            return Err(Error::InvalidArgument(format!(
                "class count must be in 1..=255, got {classes}"
            )));
        }
        if let Some(&value) = data.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            return Err(Error::ClassOutOfRange { value, classes });
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, classes: usize, value: u8) -> Result<Self> {
        Self::new(width, height, classes, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Distinct non-ignore classes appearing in the map, ascending.
    pub fn present_classes(&self) -> BTreeSet<u8> {
        self.data.iter().copied().filter(|&v| v != IGNORE).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("depth map", data.len(), width * height)?;
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "depth values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len("image", data.len(), width * height * 3)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> [u8; 3] {
        let o = index * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// Per-pixel paste mask; `true` marks a pixel taken from the source frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl MixMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_len("mask", data.len(), width * height)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, index: usize) -> bool {
        self.data[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.data[index] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_subset_of(&self, other: &MixMask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn inverted(&self) -> MixMask {
        MixMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|m| !m).collect(),
        }
    }
}

/// Aligned image, label and depth planes for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    id: String,
    image: Image,
    labels: LabelMap,
    depth: DepthMap,
}

impl SceneSample {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        labels: LabelMap,
        depth: DepthMap,
    ) -> Result<Self> {
        let dims = (image.width, image.height);
        if (labels.width, labels.height) != dims || (depth.width, depth.height) != dims {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{}, labels {}x{}, depth {}x{}",
                image.width, image.height, labels.width, labels.height, depth.width, depth.height
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            labels,
            depth,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn pixel_count(&self) -> usize {
        self.image.width * self.image.height
    }

    /// Same planes with the label map swapped, e.g. for pseudo labels.
    pub fn with_labels(&self, labels: LabelMap) -> Result<SceneSample> {
        SceneSample::new(
            self.id.clone(),
            self.image.clone(),
            labels,
            self.depth.clone(),
        )
    }

    pub fn with_id(mut self, id: impl Into<String>) -> SceneSample {
        self.id = id.into();
        self
    }

    pub fn into_parts(self) -> (String, Image, LabelMap, DepthMap) {
        (self.id, self.image, self.labels, self.depth)
    }
}

/// Blends `color` at 50% into every masked pixel, rounding down.
pub fn overlay_mask(image: &Image, mask: &MixMask, color: [u8; 3]) -> Result<Image> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let mut data = image.data.clone();
    for (px, &m) in data.chunks_exact_mut(3).zip(&mask.data) {
        if m {
            for (v, &c) in px.iter_mut().zip(&color) {
                *v = ((*v as u16 + c as u16) / 2) as u8;
            }
        }
    }
    Image::new(image.width, image.height, data)
}
