//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its vector-Jacobian product later. Nodes are only ever appended, so
//! node order is a valid topological order and the backward pass is a single
//! reverse sweep.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, Params};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How ReLU nodes propagate gradients backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluBackward {
    /// Pass the gradient where the forward input was positive.
    #[default]
    Standard,
    /// Pass the gradient only where the forward input was positive and the
    /// incoming gradient is positive (guided backpropagation).
    Guided,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    Bce {
        prob: Var,
        label: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics used by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_backward: ReluBackward,
    param_cache: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value if nothing flowed there.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Adds the gradients of every parameter node into `params[..].grad`.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut Params) -> Result<()> {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    params.get_mut(id).grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_relu_backward(mode: ReluBackward) -> Self {
        Self {
            relu_backward: mode,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::MaxPool2d { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => {
                vec![*x]
            }
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::Bce { prob, label } => vec![*prob, *label],
        }
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    /// A leaf whose gradient is tracked (e.g. an image for saliency).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push("input", t, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Places a stored parameter on the tape; repeated calls reuse one node
    /// so gradients from every use accumulate there.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(&id) {
            return Ok(v);
        }
        let p = params.get(id);
        let v = self.push("param", p.value.clone(), Op::Param(id))?;
        if !p.trainable {
            self.nodes[v.0].requires_grad = false;
        }
        self.param_cache.insert(id, v);
        Ok(v)
    }

    /// Queues a new value for a buffer (applied by the caller after the step).
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Applies queued buffer updates to `params`.
    pub fn apply_buffer_updates(&mut self, params: &mut Params) -> Result<()> {
        for (id, value) in self.take_buffer_updates() {
            params.set_value(id, value)?;
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x))
    }

    /// Cross-correlation of `x (N×C×H×W)` with `w (K×C×kh×kw)` plus optional
    /// bias `b (K)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (n, c, h, wd) = self.value(x).dims4(OP)?;
        let (k, wc, kh, kw) = self.value(w).dims4(OP)?;
        if wc != c {
            return Err(shape_err(
                OP,
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [k] {
                return Err(shape_err(
                    OP,
                    format!("bias shape {:?}, expected [{k}]", self.value(b).shape()),
                ));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                OP,
                format!("kernel {kh}×{kw} larger than padded input {h}×{wd}"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (q, p) = (geom.patch(), geom.out_pixels());
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * k * p];
        let mut cols = vec![0.0; q * p];
        for i in 0..n {
            kernels::im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut cols);
            let o = &mut out[i * k * p..(i + 1) * k * p];
            kernels::matmul_wc(wv, &cols, o, k, q, p);
            if let Some(bias) = bias {
                for (kk, &bv) in bias.iter().enumerate() {
                    o[kk * p..(kk + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(&[n, k, geom.ho, geom.wo], out)?;
        self.push(OP, out, Op::Conv2d { x, w, b, geom })
    }

    /// Per-channel batch statistics of an `N×C×H×W` value.
    pub fn batch_stats(&self, x: Var) -> Result<BatchStats> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        if n == 0 {
            return Err(NnError::EmptyBatch { op: "batch_norm" });
        }
        let data = self.value(x).data();
        let hw = h * w;
        let count = n * hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += data[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0;
            for i in 0..n {
                ss += data[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        Ok(BatchStats { mean, var, count })
    }

    /// Batch normalization of `x (N×C×H×W)`.
    ///
    /// With `stats = None` the batch's own statistics are used and
    /// differentiated through (training mode). With `Some((mean, var))` the
    /// given statistics are treated as constants (evaluation mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if n == 0 {
            return Err(NnError::EmptyBatch { op: OP });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(OP, format!("γ/β must have shape [{c}]")));
        }
        let train = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err(OP, format!("running stats must have {c} entries")));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let s = self.batch_stats(x)?;
                (s.mean, s.var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            OP,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Max pooling over `size×size` windows with the given stride and
    /// implicit `-∞` padding.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if size == 0 || stride == 0 || pad >= size {
            return Err(NnError::InvalidArgument(format!(
                "max_pool2d: size {size}, stride {stride}, pad {pad}"
            )));
        }
        if h + 2 * pad < size || w + 2 * pad < size {
            return Err(shape_err(OP, format!("window {size} larger than input {h}×{w}")));
        }
        let ho = (h + 2 * pad - size) / stride + 1;
        let wo = (w + 2 * pad - size) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for i in 0..size {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..size {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(OP, out, Op::MaxPool2d { x, argmax })
    }

    /// `N×C×H×W → N×C`, averaging over the spatial dimensions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| xd[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x))
    }

    /// `x (B×in) · wᵀ (in×out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (rows, din) = self.value(x).dims2(OP)?;
        let (dout, win) = self.value(w).dims2(OP)?;
        if din != win {
            return Err(shape_err(OP, format!("input width {din}, weight expects {win}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err(OP, format!("bias must have shape [{dout}]")));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let mut v = kernels::dot(xr, &wd[o * din..(o + 1) * din]);
                if let Some(bd) = bd {
                    v += bd[o];
                }
                out[r * dout + o] = v;
            }
        }
        let out = Tensor::new(&[rows, dout], out)?;
        self.push(OP, out, Op::Linear { x, w, b })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(shape_err(
                "slice_cols",
                format!("range {start}..{end} outside {cols} columns"),
            ));
        }
        let xd = self.value(x).data();
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(&[rows, width], out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    /// Entries `start..end` along the leading dimension, for any rank.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(shape_err(
                "slice_rows",
                format!("range {start}..{end} outside leading dim of {:?}", shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = end - start;
        let out = Tensor::new(&new_shape, data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_cols";
        if xs.is_empty() {
            return Err(NnError::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(xs[0]).dims2(OP)?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.value(v).dims2(OP)?;
            if r != rows {
                return Err(shape_err(OP, format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        self.push(OP, out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NnError::EmptyBatch { op: "mean" });
        }
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.check_same_shape(t, "mse_loss")?;
        if p.is_empty() {
            return Err(NnError::EmptyBatch { op: "mse_loss" });
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / p.len() as f64);
        self.push("mse_loss", out, Op::Mse { pred, target })
    }

    /// Mean binary cross-entropy; probabilities are clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce_loss(&mut self, prob: Var, label: Var) -> Result<Var> {
        let (p, y) = (self.value(prob), self.value(label));
        p.check_same_shape(y, "bce_loss")?;
        if p.is_empty() {
            return Err(NnError::EmptyBatch { op: "bce_loss" });
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(s / p.len() as f64);
        self.push("bce_loss", out, Op::Bce { prob, label })
    }

    /// Gradients of a one-element `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be a scalar, shape is {:?}", self.value(root).shape()),
            ));
        }
        self.backward_with_seed(root, Tensor::ones(self.value(root).shape()))
    }

    /// Vector-Jacobian product of `root` against `seed`.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.value(root).check_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        self.slot(grads, v).add_assign(g)?;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.slot(grads, *a).add_assign(g)?;
                }
                if self.wants(*b) {
                    let s = self.slot(grads, *b);
                    s.data_mut().iter_mut().zip(gd).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let s = self.slot(grads, *a);
                    for ((d, g), y) in s.data_mut().iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                }
                if self.wants(*b) {
                    let s = self.slot(grads, *b);
                    for ((d, g), x) in s.data_mut().iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Affine(x, scale) => {
                let s = self.slot(grads, *x);
                s.data_mut().iter_mut().zip(gd).for_each(|(d, g)| *d += scale * g);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let guided = self.relu_backward == ReluBackward::Guided;
                let s = self.slot(grads, *x);
                for ((d, &g), &xi) in s.data_mut().iter_mut().zip(gd).zip(xv) {
                    if xi > 0.0 && (!guided || g > 0.0) {
                        *d += g;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let s = self.slot(grads, *x);
                for ((d, g), y) in s.data_mut().iter_mut().zip(gd).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let s = self.slot(grads, *x);
                for ((d, g), y) in s.data_mut().iter_mut().zip(gd).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, gd, grads)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, wd) = node.value.dims4("batch_norm")?;
                let hw = h * wd;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_dy[ch] += gd[j];
                            sum_dy_xhat[ch] += gd[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*gamma) {
                    let s = self.slot(grads, *gamma);
                    s.data_mut().iter_mut().zip(&sum_dy_xhat).for_each(|(d, v)| *d += v);
                }
                if self.wants(*beta) {
                    let s = self.slot(grads, *beta);
                    s.data_mut().iter_mut().zip(&sum_dy).for_each(|(d, v)| *d += v);
                }
                if self.wants(*x) {
                    let s = self.slot(grads, *x);
                    let dx = s.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] += if *train {
                                    k * (gd[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let s = self.slot(grads, *x);
                let dx = s.data_mut();
                for (&src, &g) in argmax.iter().zip(gd) {
                    dx[src] += g;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let s = self.slot(grads, *x);
                for (p, &g) in gd.iter().enumerate() {
                    let share = g / hw as f64;
                    s.data_mut()[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, din) = self.value(*x).dims2("linear")?;
                let dout = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let s = self.slot(grads, *x);
                    let dx = s.data_mut();
                    for r in 0..rows {
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            for (d, wv) in dxr.iter_mut().zip(&wv[o * din..(o + 1) * din]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let s = self.slot(grads, *w);
                    let dw = s.data_mut();
                    for r in 0..rows {
                        let xr = &xv[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let s = self.slot(grads, *b);
                        let db = s.data_mut();
                        for r in 0..rows {
                            for o in 0..dout {
                                db[o] += gd[r * dout + o];
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, width) = node.value.dims2("slice_cols")?;
                let cols = self.value(*x).shape()[1];
                let s = self.slot(grads, *x);
                let dx = s.data_mut();
                for r in 0..rows {
                    for j in 0..width {
                        dx[r * cols + start + j] += gd[r * width + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let s = self.slot(grads, *x);
                s.data_mut()[start * inner..start * inner + gd.len()]
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(d, g)| *d += g);
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = node.value.dims2("concat_cols")?;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.wants(v) {
                        let s = self.slot(grads, v);
                        let dx = s.data_mut();
                        for r in 0..rows {
                            for j in 0..c {
                                dx[r * c + j] += gd[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.slot(grads, *x).data_mut().iter_mut().for_each(|d| *d += g0);
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).len() as f64;
                self.slot(grads, *x).data_mut().iter_mut().for_each(|d| *d += g0);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let k = 2.0 * gd[0] / p.len() as f64;
                if self.wants(*pred) {
                    let s = self.slot(grads, *pred);
                    for ((d, a), b) in s.data_mut().iter_mut().zip(p).zip(t) {
                        *d += k * (a - b);
                    }
                }
                if self.wants(*target) {
                    let s = self.slot(grads, *target);
                    for ((d, a), b) in s.data_mut().iter_mut().zip(p).zip(t) {
                        *d -= k * (a - b);
                    }
                }
            }
            Op::Bce { prob, label } => {
                let (p, y) = (self.value(*prob).data(), self.value(*label).data());
                let k = gd[0] / p.len() as f64;
                if self.wants(*prob) {
                    let s = self.slot(grads, *prob);
                    for ((d, &p), &y) in s.data_mut().iter_mut().zip(p).zip(y) {
                        if clamp_prob(p) == p {
                            *d += k * (-y / p + (1.0 - y) / (1.0 - p));
                        }
                    }
                }
                if self.wants(*label) {
                    let s = self.slot(grads, *label);
                    for ((d, &p), _) in s.data_mut().iter_mut().zip(p).zip(y) {
                        let p = clamp_prob(p);
                        *d -= k * (p.ln() - (1.0 - p).ln());
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let n = self.value(x).shape()[0];
        let (k, q, p) = (geom.k, geom.patch(), geom.out_pixels());
        let img = geom.c * geom.h * geom.w;
        if let Some(b) = b {
            if self.wants(b) {
                let s = self.slot(grads, b);
                let db = s.data_mut();
                for i in 0..n {
                    for (kk, d) in db.iter_mut().enumerate() {
                        *d += gd[(i * k + kk) * p..(i * k + kk + 1) * p].iter().sum::<f64>();
                    }
                }
            }
        }
        let want_w = self.wants(w);
        let want_x = self.wants(x);
        let mut cols = vec![0.0; q * p];
        if want_w {
            let xv = self.value(x).data();
            let s = self.slot(grads, w);
            let dw = s.data_mut();
            for i in 0..n {
                kernels::im2col(&xv[i * img..(i + 1) * img], geom, &mut cols);
                kernels::acc_grad_w(&gd[i * k * p..(i + 1) * k * p], &cols, dw, k, q, p);
            }
        }
        if want_x {
            let wv = self.value(w).data();
            let s = self.slot(grads, x);
            let dx = s.data_mut();
            for i in 0..n {
                kernels::grad_cols(wv, &gd[i * k * p..(i + 1) * k * p], &mut cols, k, q, p);
                kernels::col2im(&cols, geom, &mut dx[i * img..(i + 1) * img]);
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}
