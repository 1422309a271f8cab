//! Fundus image ingestion, quality gating and feature enhancement.
//!
//! The enhancement pipeline is: center crop + bilinear resize, quality
//! screening (bright area, dark area, red-blue balance), CLAHE on the CIELAB
//! lightness channel, high-boost sharpening, and min-max normalization to
//! `[0, 1]`. Random flips are a training-time augmentation and are not part
//! of [`preprocess`].

mod clahe;
mod filter;
mod io;
mod pipeline;
mod quality;

pub use clahe::{clahe_l, clahe_lab, lab_to_rgb, rgb_to_lab, LabImage};
pub use filter::{gaussian_blur, gaussian_kernel, high_boost, BoostVariant, FloatImage};
pub use io::{read_enhanced_png, read_png, write_enhanced_png, write_png};
pub use pipeline::{preprocess, PreprocessConfig, Preprocessed};
pub use quality::{
    quality_filter, quality_metrics, QualityFailure, QualityMetrics, QualityThresholds,
    QualityVerdict,
};

use rand::Rng;

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 16;

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Image(format!(
                "image {width}×{height} is smaller than {MIN_SIDE}×{MIN_SIDE}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{width}×{height} RGB needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
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

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage::from_raw(self)
    }
}

/// A preprocessed square image with values in `[0, 1]`, stored
/// channel-planar (`3×S×S`) so it maps directly onto a `C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedImage {
    side: usize,
    data: Vec<f32>,
}

impl EnhancedImage {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(Error::Image(format!(
                "enhanced image of side {side} needs {} values, got {}",
                3 * side * side,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Image("enhanced values must lie in [0, 1]".into()));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    /// Interleaved 8-bit RGB, `round(v·255)`.
    pub fn to_raw(&self) -> RawImage {
        let s = self.side;
        RawImage::from_fn(s, s, |x, y| {
            [0, 1, 2].map(|c| (self.get(c, x, y) * 255.0).round().clamp(0.0, 255.0) as u8)
        })
        .expect("side is positive")
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        let s = self.side;
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..s {
                let sy = if vertical { s - 1 - y } else { y };
                for x in 0..s {
                    let sx = if horizontal { s - 1 - x } else { x };
                    data[(c * s + y) * s + x] = self.data[(c * s + sy) * s + sx];
                }
            }
        }
        Self { side: s, data }
    }
}

/// BT.601 luma of one pixel.
pub fn luma(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Per-pixel grey values, row-major.
pub fn grey(img: &RawImage) -> Vec<f64> {
    img.pixels().map(luma).collect()
}

/// Center-crops to a square on the shorter side, then resizes bilinearly
/// to `side × side`.
pub fn crop_scale(img: &RawImage, side: usize) -> Result<RawImage> {
    if side < MIN_SIDE {
        return Err(Error::Image(format!("target side {side} < {MIN_SIDE}")));
    }
    let s = img.width.min(img.height);
    let x0 = (img.width - s) / 2;
    let y0 = (img.height - s) / 2;
    if s == side {
        return RawImage::from_fn(side, side, |x, y| img.pixel(x0 + x, y0 + y));
    }
    let scale = s as f64 / side as f64;
    let coord = |o: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, c - lo as f64)
    };
    RawImage::from_fn(side, side, |x, y| {
        let (xl, xh, fx) = coord(x);
        let (yl, yh, fy) = coord(y);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let at = |xx: usize, yy: usize| img.pixel(x0 + xx, y0 + yy)[c] as f64;
            let top = at(xl, yl) + fx * (at(xh, yl) - at(xl, yl));
            let bot = at(xl, yh) + fx * (at(xh, yh) - at(xl, yh));
            *o = (top + fy * (bot - top)).round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Draws independent horizontal and vertical flips, each with probability ½.
pub fn augment_flip<R: Rng + ?Sized>(img: &EnhancedImage, rng: &mut R) -> EnhancedImage {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    img.flipped(h, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grey_examples() {
        assert!((luma([255, 255, 255]) - 255.0).abs() < 1e-12);
        assert!((luma([255, 0, 0]) - 76.245).abs() < 1e-12);
        assert_eq!(luma([0, 0, 0]), 0.0);
    }

    #[test]
    fn crop_scale_takes_centered_square() {
        // Column index encoded in red, row in green.
        let img = RawImage::from_fn(600, 400, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]).unwrap();
        let out = crop_scale(&img, 512).unwrap();
        assert_eq!((out.width(), out.height()), (512, 512));
        // The crop starts at column 100; the first output column samples it.
        assert_eq!(out.pixel(0, 0), [100, 0, 7]);
        let same = crop_scale(&img, 400).unwrap();
        assert_eq!(same.pixel(0, 0), [100, 0, 7]);
        assert_eq!(same.pixel(399, 399), [((499) % 256) as u8, (399 % 256) as u8, 7]);
    }

    #[test]
    fn crop_scale_identity_on_matching_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = RawImage::from_fn(32, 32, |_, _| rng.random()).unwrap();
        assert_eq!(crop_scale(&img, 32).unwrap(), img);
    }

    #[test]
    fn crop_scale_preserves_constants() {
        let img = RawImage::filled(64, 64, [12, 200, 77]).unwrap();
        let out = crop_scale(&img, 32).unwrap();
        assert!(out.pixels().all(|p| p == [12, 200, 77]));
        let up = crop_scale(&img, 100).unwrap();
        assert!(up.pixels().all(|p| p == [12, 200, 77]));
    }

    #[test]
    fn rejects_degenerate_images() {
        assert!(RawImage::new(8, 32, vec![0; 8 * 32 * 3]).is_err());
        assert!(RawImage::new(16, 16, vec![0; 10]).is_err());
        let img = RawImage::filled(16, 16, [1, 2, 3]).unwrap();
        assert!(crop_scale(&img, 8).is_err());
    }

    fn random_enhanced(seed: u64, side: usize) -> EnhancedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
        EnhancedImage::new(side, data).unwrap()
    }

    #[test]
    fn flips_are_deterministic_involutive_permutations() {
        let img = random_enhanced(4, 16);
        let a = augment_flip(&img, &mut ChaCha8Rng::seed_from_u64(99));
        let b = augment_flip(&img, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            assert_eq!(img.flipped(h, v).flipped(h, v), img);
            let mut x: Vec<u32> = img.flipped(h, v).data().iter().map(|f| f.to_bits()).collect();
            let mut y: Vec<u32> = img.data().iter().map(|f| f.to_bits()).collect();
            x.sort_unstable();
            y.sort_unstable();
            assert_eq!(x, y);
        }
    }
}
