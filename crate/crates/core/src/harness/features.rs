//! Handcrafted per-pixel features for the toy model.

use crate::scene::Image;

pub const N_FEATURES: usize = 8;

/// `pixels × N_FEATURES`, row-major over pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn row(&self, px: usize) -> &[f64] {
        &self.data[px * N_FEATURES..(px + 1) * N_FEATURES]
    }
}

/// Red, green, blue, x, y, local mean luminance, local luminance spread and
/// luminance gradient magnitude, each roughly in `[0, 1]`.
pub fn extract(image: &Image) -> Features {
    let (w, h) = (image.width(), image.height());
    let lum: Vec<f64> = (0..w * h)
        .map(|i| {
            let [r, g, b] = image.pixel(i);
            (f64::from(r) + f64::from(g) + f64::from(b)) / (3.0 * 255.0)
        })
        .collect();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        lum[y * w + x]
    };
    let sx = if w > 1 { 1.0 / (w - 1) as f64 } else { 0.0 };
    let sy = if h > 1 { 1.0 / (h - 1) as f64 } else { 0.0 };

    let mut data = Vec::with_capacity(w * h * N_FEATURES);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.pixel(y * w + x);
            let (xi, yi) = (x as isize, y as isize);
            let mut sum = 0.0;
            let mut sq = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(xi + dx, yi + dy);
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / 9.0;
            let spread = (sq / 9.0 - mean * mean).max(0.0).sqrt();
            let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
            let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
            data.extend_from_slice(&[
                f64::from(r) / 255.0,
                f64::from(g) / 255.0,
                f64::from(b) / 255.0,
                x as f64 * sx,
                y as f64 * sy,
                mean,
                spread,
                (gx * gx + gy * gy).sqrt(),
            ]);
        }
    }
    Features {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_has_no_texture() {
        let f = extract(&Image::filled(4, 3, [255, 0, 51]));
        assert_eq!(f.pixels(), 12);
        let last = f.row(11);
        assert_eq!(&last[..5], &[1.0, 0.0, 0.2, 1.0, 1.0]);
        assert!((last[5] - 306.0 / 765.0).abs() < 1e-12);
        assert!(last[6].abs() < 1e-7 && last[7] == 0.0);
    }

    #[test]
    fn edge_shows_gradient() {
        let mut px = vec![0u8; 3 * 3 * 3];
        for y in 0..3 {
            let i = (y * 3 + 2) * 3;
            px[i..i + 3].copy_from_slice(&[255, 255, 255]);
        }
        let f = extract(&Image::new(3, 3, px).unwrap());
        assert!((f.row(4)[7] - 0.5).abs() < 1e-12);
        assert!(f.row(4)[6] > 0.4);
    }
}
