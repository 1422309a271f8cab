use serde::{Deserialize, Serialize};

use super::{EnhancedImage, RawImage};
use crate::error::{Error, Result};

/// Planar real-valued image, `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * width * height || width == 0 || height == 0 {
            return Err(Error::Image(format!(
                "{channels}×{height}×{width} float image needs {} values, got {}",
                channels * width * height,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn from_raw(img: &RawImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; 3 * w * h];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = p[c] as f64;
            }
        }
        Self {
            channels: 3,
            width: w,
            height: h,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] =
                        self.at(c, self.width - 1 - x, y);
                }
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Global min-max rescale to `[0, 1]`; a flat image maps to 0.5.
    pub fn minmax(&self) -> Self {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi > lo {
            self.data.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.5; self.data.len()]
        };
        Self { data, ..*self }
    }
}

/// Normalized Gaussian taps `w[0..=r]` for offsets `0..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Image(format!("blur sigma must be > 0, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection (`… 1 0 | 0 1 2 … n−1 | n−1 n−2 …`).
fn reflect(i: isize, n: usize) -> usize {
    let n2 = 2 * n as isize;
    let m = i.rem_euclid(n2) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn blur_line(src: &[f64], dst: &mut [f64], taps: &[f64]) {
    let n = src.len();
    for (i, out) in dst.iter_mut().enumerate() {
        let mut acc = taps[0] * src[i];
        for (k, w) in taps.iter().enumerate().skip(1) {
            let a = src[reflect(i as isize - k as isize, n)];
            let b = src[reflect((i + k) as isize, n)];
            acc += w * (a + b);
        }
        *out = acc;
    }
}

/// Separable Gaussian blur with reflected borders, per channel.
pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> Result<FloatImage> {
    let taps = gaussian_kernel(sigma)?;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; img.data.len()];
    let mut out = vec![0.0; img.data.len()];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..img.channels {
        let base = c * w * h;
        for y in 0..h {
            let row = base + y * w;
            blur_line(&img.data[row..row + w], &mut tmp[row..row + w], &taps);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = tmp[base + y * w + x];
            }
            blur_line(&col, &mut col_out, &taps);
            for y in 0..h {
                out[base + y * w + x] = col_out[y];
            }
        }
    }
    Ok(FloatImage { data: out, ..*img })
}

/// How the boosted image is normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostVariant {
    /// `minmax(I + k(I − G(I)))`.
    #[default]
    NormalizeBoosted,
    /// `minmax(minmax(I) − minmax(I + k(I − G(I))))`.
    SubtractNormalized,
}

/// High-boost sharpening followed by global min-max normalization.
pub fn high_boost(img: &FloatImage, sigma: f64, k: f64, variant: BoostVariant) -> Result<FloatImage> {
    if !k.is_finite() {
        return Err(Error::Image(format!("boost gain must be finite, got {k}")));
    }
    let blurred = gaussian_blur(img, sigma)?;
    let boosted: Vec<f64> = img
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(&i, &g)| i + k * (i - g))
        .collect();
    let boosted = FloatImage { data: boosted, ..*img }.minmax();
    Ok(match variant {
        BoostVariant::NormalizeBoosted => boosted,
        BoostVariant::SubtractNormalized => {
            let base = img.minmax();
            let diff = base.data.iter().zip(&boosted.data).map(|(a, b)| a - b).collect();
            FloatImage { data: diff, ..*img }.minmax()
        }
    })
}

impl FloatImage {
    /// Converts a 3-channel square image with values in `[0, 1]`.
    pub fn to_enhanced(&self) -> Result<EnhancedImage> {
        if self.channels != 3 || self.width != self.height {
            return Err(Error::Image(format!(
                "enhanced image must be 3×S×S, got {}×{}×{}",
                self.channels, self.height, self.width
            )));
        }
        EnhancedImage::new(self.width, self.data.iter().map(|&v| v as f32).collect())
    }
}
