//! Grad-CAM and guided-backpropagation saliency for the MMPN encoder.
//!
//! Both methods run once per input year and return maps at the image
//! side, normalized to a maximum of 1.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use myopia_nn::{Mode, ReluBackward, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{write_png, RawImage};
use crate::mmpn::{Mmpn, SeqItem};

/// Scalar model output to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Target {
    PMyopia,
    #[default]
    PHighMyopia,
    /// Predicted SER of forecast step `j` (0-based).
    Ser(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::PMyopia => write!(f, "p_myopia"),
            Target::PHighMyopia => write!(f, "p_high_myopia"),
            Target::Ser(j) => write!(f, "ser{j}"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_myopia" => Ok(Target::PMyopia),
            "p_high_myopia" => Ok(Target::PHighMyopia),
            _ => s
                .strip_prefix("ser")
                .and_then(|j| j.parse().ok())
                .map(Target::Ser)
                .ok_or_else(|| {
                    Error::Config(format!("unknown target {s:?}; use p_myopia, p_high_myopia or serJ"))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    GradCam,
    GuidedBackprop,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GradCam => "gradcam",
            Method::GuidedBackprop => "guided",
        })
    }
}

/// A saliency map for one input year.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Input year index, 0-based.
    pub year: usize,
    pub grid_side: usize,
    /// Unnormalized map at the resolution it was computed, row-major.
    pub grid: Vec<f64>,
    pub side: usize,
    /// `side × side` in `[0, 1]`.
    pub upsampled: Vec<f64>,
    /// Set when every grid value is zero.
    pub all_zero: bool,
}

/// `relu(Σ_k α_k A_k)` with `α_k` the spatial mean of the gradient of
/// channel `k`. Both slices are `C×H×W`.
pub fn cam_grid(activation: &[f64], gradient: &[f64], channels: usize, hw: usize) -> Vec<f64> {
    let mut grid = vec![0.0; hw];
    for k in 0..channels {
        let g = &gradient[k * hw..(k + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (o, a) in grid.iter_mut().zip(&activation[k * hw..(k + 1) * hw]) {
            *o += alpha * a;
        }
    }
    grid.iter_mut().for_each(|v| *v = v.max(0.0));
    grid
}

/// Bilinear resize of a square map, sampling at pixel centers.
pub fn upsample(grid: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let coord = |o: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(from - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(to * to);
    for y in 0..to {
        let (y0, y1, fy) = coord(y);
        for x in 0..to {
            let (x0, x1, fx) = coord(x);
            let at = |xx: usize, yy: usize| grid[yy * from + xx];
            let top = at(x0, y0) + fx * (at(x1, y0) - at(x0, y0));
            let bot = at(x0, y1) + fx * (at(x1, y1) - at(x0, y1));
            out.push(top + fy * (bot - top));
        }
    }
    out
}

/// Divides by the maximum; an all-zero map stays all-zero.
pub fn max_normalize(v: &[f64]) -> Vec<f64> {
    let hi = v.iter().copied().fold(0.0, f64::max);
    if hi > 0.0 {
        v.iter().map(|x| x / hi).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn target_var(tape: &mut Tape, model: &Mmpn, probs: Var, sers: Var, target: Target) -> Result<Var> {
    let v = match target {
        Target::PMyopia => tape.slice_cols(probs, 0, 1)?,
        Target::PHighMyopia => tape.slice_cols(probs, 1, 2)?,
        Target::Ser(j) if j < model.config.m => tape.slice_cols(sers, j, j + 1)?,
        Target::Ser(j) => {
            return Err(Error::Config(format!(
                "target ser{j} outside the {}-year forecast",
                model.config.m
            )))
        }
    };
    Ok(v)
}

struct Pass {
    tape: Tape,
    activations: Var,
    images: Var,
    grads: myopia_nn::Gradients,
}

fn run(model: &Mmpn, item: &SeqItem, target: Target, relu: ReluBackward) -> Result<Pass> {
    let batch = model.batch(&[item], None)?;
    let mut tape = Tape::with_relu_backward(relu);
    let out = model.forward(&mut tape, &batch, Mode::Eval, true)?;
    let t = target_var(&mut tape, model, out.probs, out.sers, target)?;
    let grads = tape.backward(t)?;
    Ok(Pass {
        tape,
        activations: out.activations,
        images: out.images,
        grads,
    })
}

/// Grad-CAM for every input year of one item.
pub fn grad_cam(model: &Mmpn, item: &SeqItem, target: Target) -> Result<Vec<Heatmap>> {
    let pass = run(model, item, target, ReluBackward::Standard)?;
    let acts = pass.tape.value(pass.activations);
    let grads = pass.grads.get_or_zeros(&pass.tape, pass.activations);
    let (n, c, h, w) = acts.dims4("grad_cam")?;
    let side = model.config.side;
    let per = c * h * w;
    Ok((0..n)
        .map(|year| {
            let range = year * per..(year + 1) * per;
            let grid = cam_grid(&acts.data()[range.clone()], &grads.data()[range], c, h * w);
            heatmap(year, grid, h, side)
        })
        .collect())
}

fn heatmap(year: usize, grid: Vec<f64>, grid_side: usize, side: usize) -> Heatmap {
    let all_zero = grid.iter().all(|&v| v == 0.0);
    let upsampled = if grid_side == side {
        max_normalize(&grid)
    } else {
        max_normalize(&upsample(&grid, grid_side, side))
    };
    Heatmap {
        year,
        grid_side,
        grid,
        side,
        upsampled,
        all_zero,
    }
}

/// Guided-backpropagation saliency per input year: the absolute input
/// gradient summed over the colour channels.
pub fn guided_backprop(model: &Mmpn, item: &SeqItem, target: Target) -> Result<Vec<Heatmap>> {
    let pass = run(model, item, target, ReluBackward::Guided)?;
    let g = pass.grads.get_or_zeros(&pass.tape, pass.images);
    let (n, c, s, _) = g.dims4("guided_backprop")?;
    Ok((0..n)
        .map(|year| {
            let plane = s * s;
            let base = year * c * plane;
            let grid: Vec<f64> = (0..plane)
                .map(|p| (0..c).map(|k| g.data()[base + k * plane + p].abs()).sum())
                .collect();
            heatmap(year, grid, s, s)
        })
        .collect())
}

/// The same as [`guided_backprop`] without summing channels: per year a
/// `3×S×S` planar map of absolute gradients, max-normalized.
pub fn guided_backprop_rgb(model: &Mmpn, item: &SeqItem, target: Target) -> Result<Vec<Vec<f64>>> {
    let pass = run(model, item, target, ReluBackward::Guided)?;
    let g: Tensor = pass.grads.get_or_zeros(&pass.tape, pass.images);
    let (n, ..) = g.dims4("guided_backprop")?;
    let per = g.len() / n;
    Ok((0..n)
        .map(|year| max_normalize(&g.data()[year * per..(year + 1) * per].iter().map(|v| v.abs()).collect::<Vec<_>>()))
        .collect())
}

static COLORMAP: OnceLock<Vec<[u8; 3]>> = OnceLock::new();

/// 256-entry blue→red lookup table.
pub fn colormap() -> &'static [[u8; 3]] {
    COLORMAP.get_or_init(|| {
        include_str!("../data/colormap.csv")
            .lines()
            .map(|l| {
                let v: Vec<u8> = l.split(',').map(|x| x.trim().parse().expect("colormap byte")).collect();
                [v[0], v[1], v[2]]
            })
            .collect()
    })
}

pub fn colormap_lookup(v: f64) -> [u8; 3] {
    let lut = colormap();
    let i = (v.clamp(0.0, 1.0) * (lut.len() - 1) as f64).round() as usize;
    lut[i]
}

/// `0.6·image + 0.4·colormap(heat)`.
pub fn overlay(heat: &Heatmap, img: &RawImage) -> Result<RawImage> {
    let s = heat.side;
    if img.width() != s || img.height() != s {
        return Err(Error::Image(format!(
            "overlay of a {s}×{s} heatmap on a {}×{} image",
            img.width(),
            img.height()
        )));
    }
    RawImage::from_fn(s, s, |x, y| {
        let c = colormap_lookup(heat.upsampled[y * s + x]);
        let p = img.pixel(x, y);
        [0, 1, 2].map(|k| (0.6 * p[k] as f64 + 0.4 * c[k] as f64).round() as u8)
    })
}

/// The heatmap alone as a colormapped image.
pub fn render(heat: &Heatmap) -> Result<RawImage> {
    let s = heat.side;
    RawImage::from_fn(s, s, |x, y| colormap_lookup(heat.upsampled[y * s + x]))
}

pub fn file_name(sample_id: &str, year: usize, target: Target, method: Method) -> String {
    format!("{sample_id}_{year}_{target}_{method}.png")
}

/// Writes one overlay PNG per heatmap into `dir`; returns the paths.
pub fn write_overlays(
    dir: &Path,
    item: &SeqItem,
    heatmaps: &[Heatmap],
    target: Target,
    method: Method,
) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for h in heatmaps {
        let img = item.images[h.year].to_raw();
        let path = dir.join(file_name(&item.id, h.year, target, method));
        write_png(&path, &overlay(h, &img)?)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::EnhancedImage;
    use crate::mmpn::{MmpnConfig, Phase, TrainMode, TrainSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng, lo: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(lo..1.0)).collect()
    }

    #[test]
    fn cam_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (c, h, w) = (5, 3, 4);
            let a = random(c * h * w, &mut rng, 0.0);
            let g = random(c * h * w, &mut rng, -1.0);
            let grid = cam_grid(&a, &g, c, h * w);
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for k in 0..c {
                        let mut alpha = 0.0;
                        for yy in 0..h {
                            for xx in 0..w {
                                alpha += g[(k * h + yy) * w + xx];
                            }
                        }
                        alpha /= (h * w) as f64;
                        s += alpha * a[(k * h + y) * w + x];
                    }
                    assert!((grid[y * w + x] - s.max(0.0)).abs() < 1e-8);
                    assert!(grid[y * w + x] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn channel_pool_target_gives_its_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, hw) = (3, 9);
        let a = random(c * hw, &mut rng, -1.0);
        let mut g = vec![0.0; c * hw];
        g[..hw].iter_mut().for_each(|v| *v = 1.0 / hw as f64);
        let grid = cam_grid(&a, &g, c, hw);
        for p in 0..hw {
            assert!((grid[p] - a[p].max(0.0) / hw as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn cam_normalization_ignores_positive_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, hw) = (4, 16);
        let a = random(c * hw, &mut rng, 0.0);
        let g = random(c * hw, &mut rng, -0.5);
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let n1 = max_normalize(&cam_grid(&a, &g, c, hw));
        let n2 = max_normalize(&cam_grid(&a, &g2, c, hw));
        for (x, y) in n1.iter().zip(&n2) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_corners() {
        assert!(upsample(&[0.3; 4], 2, 8).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let up = upsample(&[0.0, 1.0, 2.0, 3.0], 2, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert!(max_normalize(&[0.0, 0.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_gate_zeroes_non_positive_activations() {
        // x → W1 → relu → W2 → sum, with hand-gated gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = Tensor::new(&[1, 4], random(4, &mut rng, -1.0)).unwrap();
            let w1 = Tensor::new(&[6, 4], random(24, &mut rng, -1.0)).unwrap();
            let w2 = Tensor::new(&[1, 6], random(6, &mut rng, -1.0)).unwrap();
            let mut tape = Tape::with_relu_backward(ReluBackward::Guided);
            let xv = tape.input(x.clone()).unwrap();
            let a = tape.constant(w1.clone()).unwrap();
            let b = tape.constant(w2.clone()).unwrap();
            let pre = tape.linear(xv, a, None).unwrap();
            let act = tape.relu(pre).unwrap();
            let out = tape.linear(act, b, None).unwrap();
            let root = tape.sum(out).unwrap();
            let grads = tape.backward(root).unwrap();
            let g_pre = grads.get_or_zeros(&tape, pre);
            let pre_v = tape.value(pre).data().to_vec();
            let mut expect_x = [0.0; 4];
            for u in 0..6 {
                let upstream = w2.data()[u];
                let gate = if pre_v[u] > 0.0 && upstream > 0.0 { upstream } else { 0.0 };
                assert_eq!(g_pre.data()[u], gate);
                if pre_v[u] <= 0.0 {
                    assert_eq!(g_pre.data()[u], 0.0);
                }
                for (i, e) in expect_x.iter_mut().enumerate() {
                    *e += gate * w1.data()[u * 4 + i];
                }
            }
            let gx = grads.get_or_zeros(&tape, xv);
            for i in 0..4 {
                assert!((gx.data()[i] - expect_x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn guided_equals_plain_gradient_without_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(&[2, 3], random(6, &mut rng, -1.0)).unwrap();
        let w = Tensor::new(&[2, 3], random(6, &mut rng, -1.0)).unwrap();
        let grad = |mode| {
            let mut tape = Tape::with_relu_backward(mode);
            let xv = tape.input(x.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            let y = tape.linear(xv, wv, None).unwrap();
            let y = tape.tanh(y).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap().get_or_zeros(&tape, xv)
        };
        assert_eq!(grad(ReluBackward::Guided), grad(ReluBackward::Standard));
    }

    fn trained_fixture() -> (Mmpn, Vec<SeqItem>) {
        let c = MmpnConfig::tiny(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<SeqItem> = (0..4)
            .map(|i| {
                let images = (0..2)
                    .map(|_| EnhancedImage::new(16, (0..768).map(|_| rng.random::<f32>()).collect()).unwrap())
                    .collect();
                let base = -2.0 + i as f64;
                SeqItem {
                    id: format!("fx{i}"),
                    images,
                    input_sers: vec![base, base - 0.5],
                    target_sers: vec![base - 1.0],
                    label_myopia: base - 1.0 <= -0.5,
                    label_high_myopia: false,
                }
            })
            .collect();
        let mut model = Mmpn::new(c, 3).unwrap();
        let sched = TrainSchedule {
            phases: vec![Phase { lr: 1e-3, epochs: 30, weight_decay: 0.0 }],
            batch_train: 8,
            batch_eval: 2,
            lambda_cls: 0.5,
            mode: TrainMode::Joint,
            augment: false,
        };
        model.train(&items, &[], &sched, 1, |_| {}).unwrap();
        (model, items)
    }

    #[test]
    fn model_heatmaps() {
        let (model, items) = trained_fixture();
        let item = &items[0];
        let a = grad_cam(&model, item, Target::PMyopia).unwrap();
        let b = grad_cam(&model, item, Target::Ser(0)).unwrap();
        assert_eq!(a.len(), 2);
        for h in a.iter().chain(&b) {
            assert_eq!(h.upsampled.len(), 256);
            assert_eq!(h.grid.len(), 64);
            assert!(h.grid.iter().all(|&v| v >= 0.0));
            let max = h.upsampled.iter().copied().fold(0.0, f64::max);
            assert!(if h.all_zero { max == 0.0 } else { (max - 1.0).abs() < 1e-12 });
        }
        assert_ne!(a[0].grid, b[0].grid);
        assert!(grad_cam(&model, item, Target::Ser(1)).is_err());

        let g = guided_backprop(&model, item, Target::PHighMyopia).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|h| h.grid.iter().all(|&v| v >= 0.0) && h.upsampled.len() == 256));
        let rgb = guided_backprop_rgb(&model, item, Target::PHighMyopia).unwrap();
        assert_eq!(rgb[0].len(), 768);
    }

    #[test]
    fn overlay_blend() {
        let lut = colormap();
        assert_eq!(lut.len(), 256);
        assert!(lut[0][2] > lut[0][0] && lut[255][0] > lut[255][2]);
        let img = RawImage::from_fn(16, 16, |x, y| [(x * 15) as u8, (y * 15) as u8, 100]).unwrap();
        let zero = heatmap(0, vec![0.0; 4], 2, 16);
        assert!(zero.all_zero);
        let out = overlay(&zero, &img).unwrap();
        assert_eq!((out.width(), out.height()), (16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let p = img.pixel(x, y);
                let expect = [0, 1, 2].map(|k| (0.6 * p[k] as f64 + 0.4 * lut[0][k] as f64).round() as u8);
                assert_eq!(out.pixel(x, y), expect);
            }
        }
        let hot = heatmap(0, vec![0.0, 1.0, 2.0, 3.0], 2, 16);
        assert_eq!(overlay(&hot, &img).unwrap(), overlay(&hot, &img).unwrap());
        let wrong = RawImage::filled(17, 16, [0, 0, 0]).unwrap();
        assert!(overlay(&hot, &wrong).is_err());
    }

    #[test]
    fn names_and_targets() {
        assert_eq!(file_name("S0001_1p1", 0, Target::PHighMyopia, Method::GradCam), "S0001_1p1_0_p_high_myopia_gradcam.png");
        for t in [Target::PMyopia, Target::PHighMyopia, Target::Ser(2)] {
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
        }
        assert!("nope".parse::<Target>().is_err());
        assert_eq!(Target::default(), Target::PHighMyopia);
    }

    #[test]
    fn overlays_are_written() {
        let (model, items) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let maps = grad_cam(&model, &items[1], Target::PHighMyopia).unwrap();
        let paths = write_overlays(dir.path(), &items[1], &maps, Target::PHighMyopia, Method::GradCam).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[1].ends_with("fx1_1_p_high_myopia_gradcam.png"));
        assert!(paths.iter().all(|p| p.exists()));
    }
}
