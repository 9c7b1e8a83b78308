//! PNG encodings and corpus manifests.
//!
//! - labels: 8-bit grayscale, class index per pixel, 255 = ignore
//! - depth: 16-bit grayscale in millimetres, 0 = invalid
//! - image: 8-bit RGB
//! - masks: 8-bit grayscale, 0 or 255

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DepthMap, Image, LabelMap, MixMask, SceneSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub role: Role,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(role: Role, class_names: Vec<String>) -> Self {
        Self {
            role,
            classes: class_names.len(),
            class_names,
            entries: Vec::new(),
        }
    }

    /// Reads a manifest, resolving entry paths relative to the manifest's
    /// directory and checking that ids are unique and every file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_reader(BufReader::new(file))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in &mut manifest.entries {
            for p in [&mut entry.image, &mut entry.label, &mut entry.depth] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != self.class_names.len() {
            return Err(Error::Manifest(format!(
                "classes = {} but {} class names given",
                self.classes,
                self.class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate entry id {:?}",
                    entry.id
                )));
            }
            for p in [&entry.image, &entry.label, &entry.depth] {
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry {:?} references missing file {}",
                        entry.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest, storing entry paths relative to its directory
    /// when they live beneath it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut out = self.clone();
        for entry in &mut out.entries {
            for p in [&mut entry.image, &mut entry.label, &mut entry.depth] {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &out)?;
        Ok(())
    }

    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        self.entries
            .iter()
            .map(|e| load_sample(e, self.classes))
            .collect()
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadEncoding {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Decoded {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

fn decode_png(path: &Path, color: png::ColorType, depth: png::BitDepth) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != color || info.bit_depth != depth {
        return Err(bad(
            path,
            format!(
                "expected {color:?}/{depth:?}, found {:?}/{:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad(path, "image too large"))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(path, e.to_string()))?;
    buf.truncate(frame.buffer_size());
    Ok(Decoded {
        width: frame.width as usize,
        height: frame.height as usize,
        data: buf,
    })
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn read_label_png(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let d = decode_png(path, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    LabelMap::new(d.width, d.height, classes, d.data)
}

pub fn write_label_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    encode_png(
        path.as_ref(),
        labels.width(),
        labels.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        labels.data(),
    )
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let d = decode_png(path, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let metres = d
        .data
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 1000.0)
        .collect();
    DepthMap::new(d.width, d.height, metres)
}

/// Quantizes metres to whole millimetres; fails above the 16-bit range.
pub fn depth_to_millimetres(metres: f64) -> Result<u16> {
    let mm = (metres * 1000.0).round();
    if !(0.0..=f64::from(u16::MAX)).contains(&mm) {
        return Err(Error::InvalidArgument(format!(
            "depth {metres} m does not fit a 16-bit millimetre encoding"
        )));
    }
    Ok(mm as u16)
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(depth.data().len() * 2);
    for &d in depth.data() {
        bytes.extend_from_slice(&depth_to_millimetres(d)?.to_be_bytes());
    }
    encode_png(
        path.as_ref(),
        depth.width(),
        depth.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn read_image_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let d = decode_png(path, png::ColorType::Rgb, png::BitDepth::Eight)?;
    Image::new(d.width, d.height, d.data)
}

pub fn write_image_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    encode_png(
        path.as_ref(),
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        image.data(),
    )
}

pub fn save_mask_png(path: impl AsRef<Path>, mask: &MixMask) -> Result<()> {
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&m| if m { 255 } else { 0 })
        .collect();
    encode_png(
        path.as_ref(),
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &bytes,
    )
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<MixMask> {
    let path = path.as_ref();
    let d = decode_png(path, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    let data = d
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(bad(
                path,
                format!("mask value {other} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    MixMask::new(d.width, d.height, data)
}

/// Loads the three planes of a manifest entry, converting depth to metres.
pub fn load_sample(entry: &ManifestEntry, classes: usize) -> Result<SceneSample> {
    let image = read_image_png(&entry.image)?;
    let labels = read_label_png(&entry.label, classes)?;
    let depth = read_depth_png(&entry.depth)?;
    SceneSample::new(entry.id.clone(), image, labels, depth)
}

/// Writes `<id>_image.png`, `<id>_label.png` and `<id>_depth.png` into `dir`.
pub fn save_sample(sample: &SceneSample, dir: impl AsRef<Path>) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    let entry = ManifestEntry {
        id: sample.id().to_string(),
        image: dir.join(format!("{}_image.png", sample.id())),
        label: dir.join(format!("{}_label.png", sample.id())),
        depth: dir.join(format!("{}_depth.png", sample.id())),
    };
    write_image_png(&entry.image, sample.image())?;
    write_label_png(&entry.label, sample.labels())?;
    write_depth_png(&entry.depth, sample.depth())?;
    Ok(entry)
}
