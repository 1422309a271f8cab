//! Raw loops behind the tape ops. All buffers are row-major and contiguous.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `(C, H, W)` into columns `(C·kh·kw, Ho·Wo)`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back onto an image gradient, accumulating overlaps.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out (K×P) = w (K×Q) · cols (Q×P)`, overwriting `out`.
pub(crate) fn matmul_wc(w: &[f64], cols: &[f64], out: &mut [f64], k: usize, q: usize, p: usize) {
    out.fill(0.0);
    for kk in 0..k {
        let orow = &mut out[kk * p..(kk + 1) * p];
        let wrow = &w[kk * q..(kk + 1) * q];
        for (qq, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let crow = &cols[qq * p..(qq + 1) * p];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += wv * cv;
            }
        }
    }
}

/// `dw (K×Q) += dout (K×P) · colsᵀ (P×Q)`.
pub(crate) fn acc_grad_w(dout: &[f64], cols: &[f64], dw: &mut [f64], k: usize, q: usize, p: usize) {
    for kk in 0..k {
        let drow = &dout[kk * p..(kk + 1) * p];
        for qq in 0..q {
            let crow = &cols[qq * p..(qq + 1) * p];
            dw[kk * q + qq] += dot(drow, crow);
        }
    }
}

/// `dcols (Q×P) = wᵀ (Q×K) · dout (K×P)`, overwriting `dcols`.
pub(crate) fn grad_cols(w: &[f64], dout: &[f64], dcols: &mut [f64], k: usize, q: usize, p: usize) {
    dcols.fill(0.0);
    for kk in 0..k {
        let drow = &dout[kk * p..(kk + 1) * p];
        for qq in 0..q {
            let wv = w[kk * q + qq];
            if wv == 0.0 {
                continue;
            }
            let crow = &mut dcols[qq * p..(qq + 1) * p];
            for (c, &d) in crow.iter_mut().zip(drow) {
                *c += wv * d;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize without
    // reassociating a single running sum.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let o = i * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
