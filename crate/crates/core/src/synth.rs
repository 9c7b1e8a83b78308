//! Layered synthetic scenes with controlled per-class depth distributions.
//!
//! Each class is painted as one axis-aligned rectangle per frame: stuff
//! classes as full-width bands, thing classes as boxes of a given aspect
//! ratio. Classes are painted far to near, so nearer classes occlude
//! farther ones, and a rectangle's vertical position follows its class's
//! mean depth (nearer sits lower in the frame). Every painted pixel draws
//! its depth independently from its class's truncated normal, quantized to
//! whole millimetres. Pixels no rectangle covers are ignore-labelled with
//! invalid depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalCdf};

use crate::depth_stats::{ClassDepthHistogram, DepthBinning};
use crate::error::{Error, Result};
use crate::scene::{DepthMap, Image, LabelMap, Role, SceneSample, IGNORE};

/// Largest depth representable by the 16-bit millimetre encoding.
pub const MAX_ENCODABLE_DEPTH: f64 = 65.535;

const TWO_DOMAIN_JSON: &str = include_str!("../specs/two_domain.json");
const TWO_CLASS_JSON: &str = include_str!("../specs/two_class.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Stuff,
    Thing,
}

/// Normal distribution truncated to `[lo, hi]`, in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            mean: self.mean + offset,
            lo: self.lo + offset,
            hi: self.hi + offset,
            ..*self
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.std == 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let normal = Normal::new(self.mean, self.std).expect("std validated");
        for _ in 0..256 {
            let v = normal.sample(rng);
            if (self.lo..=self.hi).contains(&v) {
                return v;
            }
        }
        // far-tail windows: fall back to uniform inside the window
        rng.random_range(self.lo..=self.hi)
    }

    /// Probability mass in `[a, b)` after truncation.
    fn mass(&self, a: f64, b: f64) -> f64 {
        let a = a.max(self.lo);
        let b = b.min(self.hi);
        if b <= a {
            return 0.0;
        }
        let n = NormalCdf::new(self.mean, self.std).expect("std validated");
        let z = n.cdf(self.hi) - n.cdf(self.lo);
        (n.cdf(b) - n.cdf(a)) / z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ClassKind,
    pub depth: TruncatedNormal,
    /// Expected fraction of the frame covered by the class's rectangle.
    pub share: f64,
    /// Added to the depth distribution in the target domain.
    #[serde(default)]
    pub target_offset: f64,
    pub color: [u8; 3],
    /// Width over height for thing boxes.
    #[serde(default = "default_aspect")]
    pub aspect: f64,
}

fn default_aspect() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    /// Standard deviation of per-channel pixel noise.
    #[serde(default)]
    pub noise: f64,
    /// Added to every painted colour in the target domain.
    #[serde(default)]
    pub target_color_shift: [i16; 3],
    /// Vertical jitter of rectangle centres as a fraction of the height.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.1
}

impl SceneSpec {
    /// Six-class urban layout whose "building" sits 30 m farther away in
    /// the target domain than in the source domain.
    pub fn two_domain() -> Self {
        serde_json::from_str(TWO_DOMAIN_JSON).expect("bundled spec parses")
    }

    /// Two well-separated classes with no domain shift.
    pub fn two_class() -> Self {
        serde_json::from_str(TWO_CLASS_JSON).expect("bundled spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn stuff_classes(&self) -> std::collections::BTreeSet<String> {
        self.classes
            .iter()
            .filter(|c| c.kind == ClassKind::Stuff)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        if self.classes.is_empty() || self.classes.len() >= IGNORE as usize {
            return bad(format!("need 1..=254 classes, got {}", self.classes.len()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1]".into());
        }
        let mut total = 0.0;
        for c in &self.classes {
            if !(0.0..=1.0).contains(&c.share) {
                return bad(format!("{}: share {} outside [0, 1]", c.name, c.share));
            }
            total += c.share;
            if !(c.aspect > 0.0 && c.aspect.is_finite()) {
                return bad(format!("{}: aspect must be positive", c.name));
            }
            for (role, d) in [
                ("source", c.depth),
                ("target", c.depth.shifted(c.target_offset)),
            ] {
                if !(d.std >= 0.0 && d.std.is_finite() && d.mean.is_finite()) {
                    return bad(format!("{} ({role}): bad depth mean/std", c.name));
                }
                if !(d.lo >= 0.0 && d.lo <= d.hi && d.hi <= MAX_ENCODABLE_DEPTH) {
                    return bad(format!(
                        "{} ({role}): need 0 <= lo <= hi <= {MAX_ENCODABLE_DEPTH}, got [{}, {}]",
                        c.name, d.lo, d.hi
                    ));
                }
            }
        }
        if total > 1.0 + 1e-9 {
            return bad(format!("class shares sum to {total} > 1"));
        }
        Ok(())
    }

    fn distribution(&self, class: usize, role: Role) -> TruncatedNormal {
        let c = &self.classes[class];
        match role {
            Role::Source => c.depth,
            Role::Target => c.depth.shifted(c.target_offset),
        }
    }
}

/// Vertical centre, as a fraction of the frame height, of a class at `depth`.
pub fn row_fraction_for_depth(depth: f64) -> f64 {
    0.25 + 0.7 * (-depth / 15.0).exp()
}

fn sample_seed(spec_seed: u64, role: Role, index: usize) -> u64 {
    let role_tag: u64 = match role {
        Role::Source => 0x5eed_0001,
        Role::Target => 0x5eed_0002,
    };
    spec_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(role_tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index as u64)
}

struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn place(spec: &SceneSpec, class: usize, mean: f64, rng: &mut impl Rng) -> Rect {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let c = &spec.classes[class];
    let area = c.share * w * h;
    let (rw, rh) = match c.kind {
        ClassKind::Stuff => (w, (area / w).min(h)),
        ClassKind::Thing => {
            let rh = (area / c.aspect).sqrt().min(h);
            ((area / rh.max(1e-9)).min(w), rh)
        }
    };
    let jitter = if spec.jitter > 0.0 {
        rng.random_range(-spec.jitter..=spec.jitter)
    } else {
        0.0
    };
    let cy = (row_fraction_for_depth(mean) + jitter) * h;
    let cx = if rw < w {
        rng.random_range(rw / 2.0..=w - rw / 2.0)
    } else {
        w / 2.0
    };
    let clamp_span = |centre: f64, size: f64, limit: f64| {
        let size = size.round().clamp(0.0, limit);
        let start = (centre - size / 2.0).round().clamp(0.0, limit - size);
        (start as usize, (start + size) as usize)
    };
    let (y0, y1) = clamp_span(cy, rh, h);
    let (x0, x1) = clamp_span(cx, rw, w);
    Rect { x0, y0, x1, y1 }
}

fn generate_one(spec: &SceneSpec, role: Role, index: usize) -> Result<SceneSample> {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, role, index));
    let mut labels = vec![IGNORE; w * h];
    let mut depth = vec![0.0; w * h];

    let mut order: Vec<usize> = (0..spec.classes.len()).collect();
    let means: Vec<f64> = order
        .iter()
        .map(|&i| spec.distribution(i, role).mean)
        .collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));

    for &class in &order {
        if spec.classes[class].share == 0.0 {
            continue;
        }
        let dist = spec.distribution(class, role);
        let r = place(spec, class, dist.mean, &mut rng);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let p = y * w + x;
                labels[p] = class as u8;
                let mm = (dist.sample(&mut rng) * 1000.0).round().max(1.0);
                depth[p] = mm / 1000.0;
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("noise validated");
    let shift = match role {
        Role::Source => [0; 3],
        Role::Target => spec.target_color_shift,
    };
    let mut image = Vec::with_capacity(w * h * 3);
    for &l in &labels {
        let base = if l == IGNORE {
            [0u8; 3]
        } else {
            spec.classes[l as usize].color
        };
        for ch in 0..3 {
            let painted = if l == IGNORE {
                0.0
            } else {
                f64::from(shift[ch])
            };
            let n = if spec.noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image.push(
                (f64::from(base[ch]) + painted + n)
                    .round()
                    .clamp(0.0, 255.0) as u8,
            );
        }
    }

    let role_name = match role {
        Role::Source => "source",
        Role::Target => "target",
    };
    SceneSample::new(
        format!("{role_name}_{index:05}"),
        Image::new(w, h, image)?,
        LabelMap::new(w, h, spec.classes.len(), labels)?,
        DepthMap::new(w, h, depth)?,
    )
}

/// `n` frames of the given domain, reproducible from the spec's seed.
pub fn generate(spec: &SceneSpec, role: Role, n: usize) -> Result<Vec<SceneSample>> {
    generate_range(spec, role, 0, n)
}

/// Frames `start..start + n`; frame `i` is identical whichever range
/// produced it.
pub fn generate_range(
    spec: &SceneSpec,
    role: Role,
    start: usize,
    n: usize,
) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidSpec("sample count must be at least 1".into()));
    }
    (start..start + n)
        .map(|i| generate_one(spec, role, i))
        .collect()
}

/// Analytic per-class depth densities of the given domain under `binning`.
/// Occlusion does not bias them because depths are drawn per pixel.
pub fn expected_histogram(
    spec: &SceneSpec,
    role: Role,
    binning: &DepthBinning,
) -> ClassDepthHistogram {
    let edges = binning.edges();
    let n = binning.n_bins();
    let densities = (0..spec.classes.len())
        .map(|class| {
            let mut row = vec![0.0; n];
            if spec.classes[class].share == 0.0 {
                return row;
            }
            let d = spec.distribution(class, role);
            if d.std == 0.0 {
                let v = d.mean.clamp(d.lo, d.hi).max(0.001);
                if let Some(k) = binning.bin_of(v) {
                    row[k] = 1.0;
                }
                return row;
            }
            for (k, slot) in row.iter_mut().enumerate() {
                let lo = edges[k];
                let hi = if k + 1 == n {
                    f64::INFINITY
                } else {
                    edges[k + 1]
                };
                *slot = d.mass(lo, hi);
            }
            row
        })
        .collect();
    ClassDepthHistogram::from_densities(binning, densities).expect("rows sized to binning")
}
