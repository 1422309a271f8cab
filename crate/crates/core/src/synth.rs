//! Synthetic macula-centred fundus photographs.
//!
//! Each image has a circular field on a dark surround, a red-dominant
//! retina with radial vignetting, a bright optic disc, a darker macula, a
//! vessel tree radiating from the disc, and a choroidal tessellation
//! pattern. Tessellation strength grows with myopia and with progression
//! rate, and also shifts the retina towards orange-red, so the images carry
//! a recoverable correlate of the refractive trajectory.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{RawImage, MIN_SIDE};
use crate::seeding::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundusParams {
    /// Current spherical equivalent, D.
    pub ser: f64,
    /// Annual myopic shift, D/yr (positive = progressing).
    pub rate: f64,
    /// Optic disc on the right of the image.
    pub right_eye: bool,
}

impl Default for FundusParams {
    fn default() -> Self {
        Self {
            ser: 0.5,
            rate: 0.3,
            right_eye: true,
        }
    }
}

/// Tessellation strength in `[0, 1]`; nondecreasing in `rate` and in `−ser`.
pub fn tessellation(ser: f64, rate: f64) -> f64 {
    let r = (rate / 1.2).clamp(0.0, 1.0);
    let s = ((1.0 - ser) / 8.0).clamp(0.0, 1.0);
    (0.1 + 0.6 * r + 0.3 * s).clamp(0.0, 1.0)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one `side × side` fundus image, deterministic in `seed`.
pub fn render_fundus(params: &FundusParams, side: usize, seed: u64) -> Result<RawImage> {
    if side < MIN_SIDE {
        return Err(Error::Image(format!("fundus side {side} < {MIN_SIDE}")));
    }
    if !params.ser.is_finite() || !params.rate.is_finite() {
        return Err(Error::Image("fundus parameters must be finite".into()));
    }
    let mut rng = substream(seed, "fundus");
    let s = side as f64;
    let amp = tessellation(params.ser, params.rate);

    let side_sign = if params.right_eye { 1.0 } else { -1.0 };
    let disc = (
        side_sign * rng.random_range(0.22..0.27),
        rng.random_range(-0.03..0.03),
    );
    let disc_r = rng.random_range(0.050..0.058);

    // Choroidal stripes: a few oriented waves with random phase.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(18.0..28.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (theta.cos() * freq, theta.sin() * freq, phase, rng.random_range(0.7..1.0))
        })
        .collect();
    let wave_norm: f64 = waves.iter().map(|w| w.3).sum();

    // Vessel centrelines: bent rays leaving the disc.
    let mut vessel = vec![0.0f64; side * side];
    let n_vessels = 6;
    for k in 0..n_vessels {
        let base = 2.0 * PI * k as f64 / n_vessels as f64;
        let angle = base + rng.random_range(-0.3..0.3);
        let bend = rng.random_range(-2.0..2.0);
        let width = rng.random_range(0.008..0.013) * (if k % 2 == 0 { 1.3 } else { 1.0 });
        let len = rng.random_range(0.45..0.7);
        let steps = (len * s * 1.5) as usize + 2;
        let (dx, dy) = (angle.cos(), angle.sin());
        for i in 0..steps {
            let t = len * i as f64 / (steps - 1) as f64;
            let px = disc.0 + dx * t - dy * bend * t * t;
            let py = disc.1 + dy * t + dx * bend * t * t;
            let w = width * (1.0 - 0.5 * t / len) * s;
            let (cx, cy) = ((px + 0.5) * s - 0.5, (py + 0.5) * s - 0.5);
            let reach = (w * 2.0).ceil() as isize + 1;
            for yy in (cy as isize - reach)..=(cy as isize + reach) {
                for xx in (cx as isize - reach)..=(cx as isize + reach) {
                    if xx < 0 || yy < 0 || xx >= side as isize || yy >= side as isize {
                        continue;
                    }
                    let d = ((xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2)).sqrt();
                    let v = 1.0 - smoothstep(0.5 * w, w + 0.5, d);
                    let cell = &mut vessel[yy as usize * side + xx as usize];
                    *cell = cell.max(v);
                }
            }
        }
    }

    let noise = Normal::new(0.0, 1.5).expect("valid normal");
    let tint: f64 = rng.random_range(-6.0..6.0);
    RawImage::from_fn(side, side, |x, y| {
        let u = (x as f64 + 0.5) / s - 0.5;
        let v = (y as f64 + 0.5) / s - 0.5;
        let r = (u * u + v * v).sqrt();
        let field = 1.0 - smoothstep(0.49, 0.505, r);

        let vignette = 1.0 - 1.2 * r * r;
        let mut red = (165.0 + tint) * vignette;
        let mut green = 72.0 * vignette * (1.0 - 0.45 * amp);
        let mut blue = 34.0 * vignette * (1.0 - 0.35 * amp);

        let stripes = waves
            .iter()
            .map(|&(fx, fy, ph, w)| w * (fx * u + fy * v + ph).sin())
            .sum::<f64>()
            / wave_norm;
        red += amp * 28.0 * stripes;
        green -= amp * 14.0 * (stripes + 1.0) * 0.5;

        let macula = (-(u * u + v * v) / (2.0 * 0.055 * 0.055)).exp();
        red *= 1.0 - 0.35 * macula;
        green *= 1.0 - 0.45 * macula;
        blue *= 1.0 - 0.3 * macula;

        let vs = vessel[y * side + x];
        red *= 1.0 - 0.35 * vs;
        green *= 1.0 - 0.55 * vs;
        blue *= 1.0 - 0.4 * vs;

        let dd = ((u - disc.0).powi(2) + (v - disc.1).powi(2)).sqrt();
        let d = 1.0 - smoothstep(0.6 * disc_r, disc_r, dd);
        red = red + d * (225.0 - red);
        green = green + d * (175.0 - green);
        blue = blue + d * (110.0 - blue);

        let surround = 2.0;
        let mut out = [0u8; 3];
        for (o, c) in out.iter_mut().zip([red, green, blue]) {
            let val = field * (c + noise.sample(&mut rng)) + (1.0 - field) * surround;
            *o = val.round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}
