//! CIELAB conversion (D65) and CLAHE on the lightness channel.

use super::RawImage;
use crate::error::{Error, Result};

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn f_lab(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

fn f_lab_inv(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D {
        t * t * t
    } else {
        3.0 * D * D * (t - 4.0 / 29.0)
    }
}

fn pixel_to_lab(p: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = p.map(|v| srgb_to_linear(v as f64 / 255.0));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (f_lab(x / WHITE[0]), f_lab(y / WHITE[1]), f_lab(z / WHITE[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_to_pixel(l: f64, a: f64, b: f64) -> [u8; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let x = WHITE[0] * f_lab_inv(fx);
    let y = WHITE[1] * f_lab_inv(fy);
    let z = WHITE[2] * f_lab_inv(fz);
    let r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
    let g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
    let bl = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
    [r, g, bl].map(|v| (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn rgb_to_lab(img: &RawImage) -> LabImage {
    let n = img.width() * img.height();
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.pixels() {
        let [lv, av, bv] = pixel_to_lab(p);
        l.push(lv);
        a.push(av);
        b.push(bv);
    }
    LabImage {
        width: img.width(),
        height: img.height(),
        l,
        a,
        b,
    }
}

pub fn lab_to_rgb(lab: &LabImage) -> Result<RawImage> {
    let mut data = Vec::with_capacity(lab.l.len() * 3);
    for i in 0..lab.l.len() {
        data.extend_from_slice(&lab_to_pixel(lab.l[i], lab.a[i], lab.b[i]));
    }
    RawImage::new(lab.width, lab.height, data)
}

fn bin_of(l: f64) -> usize {
    ((l / 100.0 * BINS as f64) as isize).clamp(0, BINS as isize - 1) as usize
}

/// Tile `j` of `t` over `n` pixels spans `[j·n/t, (j+1)·n/t)`.
fn tile_bounds(j: usize, t: usize, n: usize) -> (usize, usize) {
    (j * n / t, (j + 1) * n / t)
}

/// Clipped, redistributed, cumulative mapping of one tile: bin → L.
fn tile_lut(hist: &[f64; BINS], npix: f64, clip_limit: f64) -> [f64; BINS] {
    let clip = clip_limit * npix / BINS as f64;
    let mut h = *hist;
    let mut excess = 0.0;
    for c in &mut h {
        if *c > clip {
            excess += *c - clip;
            *c = clip;
        }
    }
    let share = excess / BINS as f64;
    let mut lut = [0.0; BINS];
    let mut acc = 0.0;
    for (i, c) in h.iter().enumerate() {
        acc += c + share;
        lut[i] = (acc / npix * 100.0).min(100.0);
    }
    lut
}

/// Locates `p` between tile centers: `(lower tile, upper tile, weight)`.
fn locate(p: usize, t: usize, n: usize) -> (usize, usize, f64) {
    let center = |j: usize| {
        let (s, e) = tile_bounds(j, t, n);
        (s + e) as f64 / 2.0 - 0.5
    };
    let x = p as f64;
    if x <= center(0) {
        return (0, 0, 0.0);
    }
    if x >= center(t - 1) {
        return (t - 1, t - 1, 0.0);
    }
    let mut j = 0;
    while center(j + 1) <= x {
        j += 1;
    }
    let (c0, c1) = (center(j), center(j + 1));
    (j, j + 1, (x - c0) / (c1 - c0))
}

/// CLAHE on the L plane; `a` and `b` pass through untouched.
pub fn clahe_lab(lab: &LabImage, clip_limit: f64, tiles: usize) -> Result<LabImage> {
    if tiles < 2 {
        return Err(Error::Image(format!("CLAHE needs at least a 2×2 grid, got {tiles}")));
    }
    if !(clip_limit >= 1.0) {
        return Err(Error::Image(format!("CLAHE clip limit must be ≥ 1, got {clip_limit}")));
    }
    let (w, h) = (lab.width, lab.height);
    if w < tiles || h < tiles {
        return Err(Error::Image(format!(
            "{w}×{h} image is smaller than the {tiles}×{tiles} tile grid"
        )));
    }
    let mut luts = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        let (y0, y1) = tile_bounds(ty, tiles, h);
        for tx in 0..tiles {
            let (x0, x1) = tile_bounds(tx, tiles, w);
            let mut hist = [0.0; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(lab.l[y * w + x])] += 1.0;
                }
            }
            let npix = ((y1 - y0) * (x1 - x0)) as f64;
            luts.push(tile_lut(&hist, npix, clip_limit));
        }
    }
    let mut l = vec![0.0; w * h];
    for y in 0..h {
        let (ya, yb, fy) = locate(y, tiles, h);
        for x in 0..w {
            let (xa, xb, fx) = locate(x, tiles, w);
            let bin = bin_of(lab.l[y * w + x]);
            let at = |tx: usize, ty: usize| luts[ty * tiles + tx][bin];
            let top = at(xa, ya) + fx * (at(xb, ya) - at(xa, ya));
            let bot = at(xa, yb) + fx * (at(xb, yb) - at(xa, yb));
            l[y * w + x] = top + fy * (bot - top);
        }
    }
    Ok(LabImage { l, ..lab.clone() })
}

/// RGB → Lab, CLAHE on L, Lab → RGB.
pub fn clahe_l(img: &RawImage, clip_limit: f64, tiles: usize) -> Result<RawImage> {
    lab_to_rgb(&clahe_lab(&rgb_to_lab(img), clip_limit, tiles)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lab_reference_values() {
        let white = pixel_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
        // sRGB red: L 53.24, a 80.09, b 67.20.
        let red = pixel_to_lab([255, 0, 0]);
        assert!((red[0] - 53.24).abs() < 0.01 && (red[1] - 80.09).abs() < 0.02 && (red[2] - 67.20).abs() < 0.02);
    }

    #[test]
    fn lab_round_trip_is_lossless_on_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = RawImage::from_fn(32, 32, |_, _| rng.random()).unwrap();
        assert_eq!(lab_to_rgb(&rgb_to_lab(&img)).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RawImage::filled(40, 33, [150, 60, 40]).unwrap();
        let out = clahe_l(&img, 2.0, 8).unwrap();
        let first = out.pixel(0, 0);
        assert!(out.pixels().all(|p| p == first));
    }

    #[test]
    fn two_tone_low_contrast_widens_l_range() {
        let img = RawImage::from_fn(64, 64, |x, y| {
            if (x / 4 + y / 4) % 2 == 0 {
                [110, 110, 110]
            } else {
                [122, 122, 122]
            }
        })
        .unwrap();
        let range = |lab: &LabImage| {
            let lo = lab.l.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = lab.l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        let lab = rgb_to_lab(&img);
        let out = clahe_lab(&lab, 2.0, 8).unwrap();
        // Direct computation on one tile: each tone fills half of an 8×8
        // tile, clip 2·64/256 = 0.5, so almost all mass is redistributed.
        let lo_bin = bin_of(lab.l[0]);
        let hi_bin = bin_of(lab.l[4]);
        let mut hist = [0.0; BINS];
        hist[lo_bin] = 32.0;
        hist[hi_bin] = 32.0;
        let lut = tile_lut(&hist, 64.0, 2.0);
        assert!(lut[hi_bin] - lut[lo_bin] > lab.l[4] - lab.l[0]);
        assert!(range(&out) > range(&lab), "{} vs {}", range(&out), range(&lab));
    }

    #[test]
    fn chroma_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = RawImage::from_fn(32, 24, |_, _| rng.random()).unwrap();
        let lab = rgb_to_lab(&img);
        let out = clahe_lab(&lab, 2.0, 4).unwrap();
        assert_eq!(out.a, lab.a);
        assert_eq!(out.b, lab.b);
        assert_ne!(out.l, lab.l);
        assert!(out.l.iter().all(|v| (0.0..=100.0).contains(v)));
    }

    #[test]
    fn rejects_bad_grids() {
        let img = RawImage::filled(16, 16, [1, 2, 3]).unwrap();
        assert!(clahe_l(&img, 2.0, 1).is_err());
        assert!(clahe_l(&img, 2.0, 17).is_err());
        assert!(clahe_l(&img, 0.5, 4).is_err());
        assert!(clahe_l(&img, 2.0, 16).is_ok());
    }

    #[test]
    fn locate_interpolates_between_centers() {
        // Four tiles over 16 pixels: centers at 1.5, 5.5, 9.5, 13.5.
        assert_eq!(locate(0, 4, 16), (0, 0, 0.0));
        assert_eq!(locate(15, 4, 16), (3, 3, 0.0));
        assert_eq!(locate(7, 4, 16), (1, 2, 0.375));
    }
}
