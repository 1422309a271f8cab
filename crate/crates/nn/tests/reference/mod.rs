//! Naive loop references used as independent oracles in tests.
#![allow(dead_code)]

/// Direct quadruple-loop cross-correlation. `x: N×C×H×W`, `w: K×C×kh×kw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * ho * wo];
    for b in 0..n {
        for o in 0..k {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * k + o) * ho + y) * wo + xo] = s;
                }
            }
        }
    }
    (out, ho, wo)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar-loop LSTM cell for a single row. Gate order i, f, g, o.
/// `w_ih: 4H×I`, `w_hh: 4H×H`, `b: 4H`.
pub fn lstm_cell_naive(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hs = h.len();
    let is = x.len();
    let mut pre = vec![0.0; 4 * hs];
    for r in 0..4 * hs {
        let mut s = b[r];
        for j in 0..is {
            s += w_ih[r * is + j] * x[j];
        }
        for j in 0..hs {
            s += w_hh[r * hs + j] * h[j];
        }
        pre[r] = s;
    }
    let mut h2 = vec![0.0; hs];
    let mut c2 = vec![0.0; hs];
    for u in 0..hs {
        let i = sigmoid(pre[u]);
        let f = sigmoid(pre[hs + u]);
        let g = pre[2 * hs + u].tanh();
        let o = sigmoid(pre[3 * hs + u]);
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}
