//! The multi-year myopia prediction network: a residual CNN encodes each
//! input-year image, the pooled features are concatenated with that year's
//! standardized SER and fed through an LSTM, and the LSTM is then rolled
//! forward `m` steps on its own SER predictions. A linear head maps each
//! decoder state to an SER; a two-output sigmoid head on the final state
//! gives the myopia and high-myopia risks.

use std::io::Write;
use std::path::{Path, PathBuf};

use myopia_nn::{
    Adam, AdamConfig, BatchNorm2d, Conv2d, Linear, LstmCell, Mode, NnError, Params,
    ResidualBlock, Tape, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{check_pair, SequenceSample};
use crate::error::{Error, Result};
use crate::imaging::{EnhancedImage, MIN_SIDE};
use crate::seeding::substream;

/// Images enter the network as `(x − 0.5) / 0.25`.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pool after the stem.
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Stride of the first block, 1 or 2.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmpnConfig {
    pub side: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub lstm_hidden: usize,
    pub n: usize,
    pub m: usize,
}

impl Default for MmpnConfig {
    fn default() -> Self {
        Self {
            side: 64,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            stages: vec![
                StageSpec { channels: 16, blocks: 2, stride: 1 },
                StageSpec { channels: 32, blocks: 2, stride: 2 },
                StageSpec { channels: 64, blocks: 2, stride: 2 },
            ],
            lstm_hidden: 128,
            n: 1,
            m: 1,
        }
    }
}

impl MmpnConfig {
    /// The ResNet34 layout: 7×7 stem with max pool, stages (3, 4, 6, 3).
    pub fn resnet34(side: usize, n: usize, m: usize) -> Self {
        Self {
            side,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
                .into_iter()
                .map(|(channels, blocks, stride)| StageSpec { channels, blocks, stride })
                .collect(),
            lstm_hidden: 128,
            n,
            m,
        }
    }

    /// Side 16, one 8-channel block, hidden 8.
    pub fn tiny(n: usize, m: usize) -> Self {
        Self {
            side: 16,
            stem: StemSpec {
                channels: 8,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            stages: vec![StageSpec { channels: 8, blocks: 1, stride: 1 }],
            lstm_hidden: 8,
            n,
            m,
        }
    }

    /// Length of the pooled image feature.
    pub fn feature_len(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Spatial side of the last convolutional activations.
    pub fn final_spatial(&self) -> usize {
        let conv = |x: usize, k: usize, s: usize| (x + 2 * (k / 2)).saturating_sub(k) / s + 1;
        let mut x = conv(self.side, self.stem.kernel, self.stem.stride);
        if self.stem.max_pool {
            x = conv(x, 3, 2);
        }
        for st in &self.stages {
            if st.stride == 2 {
                x = conv(x, 3, 2);
            }
        }
        x
    }

    pub fn validate(&self) -> Result<()> {
        check_pair(self.n, self.m)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.side < MIN_SIDE {
            return bad(format!("model side {} < {MIN_SIDE}", self.side));
        }
        let s = &self.stem;
        if s.channels == 0 || s.kernel == 0 || s.kernel.is_multiple_of(2) || s.stride == 0 {
            return bad(format!("invalid stem {s:?}"));
        }
        if self.stages.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        for st in &self.stages {
            if st.channels == 0 || st.blocks == 0 || !(1..=2).contains(&st.stride) {
                return bad(format!("invalid stage {st:?}"));
            }
        }
        if self.lstm_hidden == 0 {
            return bad("lstm_hidden must be positive".into());
        }
        let mut x = self.side;
        let mut shrink = |k: usize, st: usize| {
            if x + 2 * (k / 2) < k {
                x = 0;
            } else {
                x = (x + 2 * (k / 2) - k) / st + 1;
            }
        };
        shrink(s.kernel, s.stride);
        if s.max_pool {
            shrink(3, 2);
        }
        for st in &self.stages {
            if st.stride == 2 {
                shrink(3, 2);
            }
        }
        if x == 0 {
            return bad(format!("side {} collapses to nothing in the encoder", self.side));
        }
        Ok(())
    }
}

/// One training or inference example: `n` preprocessed images with their
/// SERs and, when known, the `m` future SERs and risk labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqItem {
    pub id: String,
    pub images: Vec<EnhancedImage>,
    pub input_sers: Vec<f64>,
    pub target_sers: Vec<f64>,
    pub label_myopia: bool,
    pub label_high_myopia: bool,
}

impl SeqItem {
    pub fn from_sample(sample: &SequenceSample, images: Vec<EnhancedImage>) -> Self {
        Self {
            id: sample.id(),
            images,
            input_sers: sample.input_sers.clone(),
            target_sers: sample.target_sers.clone(),
            label_myopia: sample.label_myopia,
            label_high_myopia: sample.label_high_myopia,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub predicted_sers: Vec<f64>,
    pub p_myopia: f64,
    pub p_high_myopia: f64,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Network input, `(n·B)×3×S×S`, year-major.
    pub images: Var,
    /// Last convolutional activations, `(n·B)×C×h×w`, year-major.
    pub activations: Var,
    /// Pooled features, `(n·B)×F`.
    pub features: Var,
    /// Predicted SERs in diopters, `B×m`.
    pub sers: Var,
    /// `B×2`: myopia, high myopia.
    pub probs: Var,
}

/// Batched input tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub sers: Tensor,
    pub targets: Tensor,
    pub labels: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Joint { lambda_cls: f64 },
    Regression,
    Classification,
}

#[derive(Debug, Clone)]
pub struct Mmpn {
    pub config: MmpnConfig,
    pub params: Params,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
    lstm: LstmCell,
    reg_head: Linear,
    cls_head: Linear,
    ser_mean: myopia_nn::ParamId,
    ser_std: myopia_nn::ParamId,
}

impl Mmpn {
    /// Builds a randomly initialized model from the `init` substream of `seed`.
    pub fn new(config: MmpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let mut params = Params::new();
        let s = config.stem;
        let stem_conv = Conv2d::new(
            &mut params,
            "encoder.stem.conv",
            3,
            s.channels,
            s.kernel,
            s.stride,
            s.kernel / 2,
            false,
            &mut rng,
        )?;
        let stem_bn = BatchNorm2d::new(&mut params, "encoder.stem.bn", s.channels)?;
        let mut blocks = Vec::new();
        let mut cin = s.channels;
        for (i, st) in config.stages.iter().enumerate() {
            for j in 0..st.blocks {
                let down = j == 0 && st.stride == 2;
                let name = format!("encoder.stage{i}.block{j}");
                blocks.push(ResidualBlock::new(&mut params, &name, cin, st.channels, down, &mut rng)?);
                cin = st.channels;
            }
        }
        let f = config.feature_len();
        let h = config.lstm_hidden;
        let lstm = LstmCell::new(&mut params, "lstm", f + 1, h, &mut rng)?;
        let reg_head = Linear::new(&mut params, "head.regression", h, 1, true, &mut rng)?;
        let cls_head = Linear::new(&mut params, "head.classification", h, 2, true, &mut rng)?;
        let ser_mean = params.add_buffer("ser.mean", Tensor::zeros(&[1]))?;
        let ser_std = params.add_buffer("ser.std", Tensor::ones(&[1]))?;
        Ok(Self {
            config,
            params,
            stem_conv,
            stem_bn,
            blocks,
            lstm,
            reg_head,
            cls_head,
            ser_mean,
            ser_std,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// SER standardization `(mean, std)`.
    pub fn ser_stats(&self) -> (f64, f64) {
        (
            self.params.value(self.ser_mean).data()[0],
            self.params.value(self.ser_std).data()[0],
        )
    }

    pub fn set_ser_stats(&mut self, mean: f64, std: f64) -> Result<()> {
        if !mean.is_finite() || !(std > 0.0) || !std.is_finite() {
            return Err(Error::Model(format!("invalid SER statistics ({mean}, {std})")));
        }
        self.params.set_value(self.ser_mean, Tensor::new(&[1], vec![mean])?)?;
        self.params.set_value(self.ser_std, Tensor::new(&[1], vec![std])?)?;
        Ok(())
    }

    pub fn check_item(&self, item: &SeqItem) -> Result<()> {
        let c = &self.config;
        let err = |msg: String| Err(Error::Model(format!("{}: {msg}", item.id)));
        if item.images.len() != c.n || item.input_sers.len() != c.n {
            return err(format!(
                "model expects {} input years, got {} images and {} SERs",
                c.n,
                item.images.len(),
                item.input_sers.len()
            ));
        }
        if !item.target_sers.is_empty() && item.target_sers.len() != c.m {
            return err(format!("model predicts {} years, item has {}", c.m, item.target_sers.len()));
        }
        if let Some(img) = item.images.iter().find(|i| i.side() != c.side) {
            return err(format!("image side {} does not match model side {}", img.side(), c.side));
        }
        if item.input_sers.iter().chain(&item.target_sers).any(|v| !v.is_finite()) {
            return err("non-finite SER".into());
        }
        Ok(())
    }

    /// Packs items into year-major tensors. `flips[b]` flips every year of
    /// item `b` horizontally and/or vertically. Missing targets become zeros.
    pub fn batch(&self, items: &[&SeqItem], flips: Option<&[(bool, bool)]>) -> Result<Batch> {
        let c = &self.config;
        let b = items.len();
        if b == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        let plane = 3 * c.side * c.side;
        let mut images = Vec::with_capacity(c.n * b * plane);
        for t in 0..c.n {
            for (k, item) in items.iter().enumerate() {
                self.check_item(item)?;
                let img = &item.images[t];
                let flipped;
                let src = match flips.map(|f| f[k]) {
                    Some((h, v)) if h || v => {
                        flipped = img.flipped(h, v);
                        &flipped
                    }
                    _ => img,
                };
                images.extend(src.data().iter().map(|&v| (v as f64 - INPUT_CENTER) / INPUT_SCALE));
            }
        }
        let mut sers = Vec::with_capacity(b * c.n);
        let mut targets = Vec::with_capacity(b * c.m);
        let mut labels = Vec::with_capacity(b * 2);
        for item in items {
            sers.extend(&item.input_sers);
            if item.target_sers.is_empty() {
                targets.extend(std::iter::repeat_n(0.0, c.m));
            } else {
                targets.extend(&item.target_sers);
            }
            labels.push(item.label_myopia as u8 as f64);
            labels.push(item.label_high_myopia as u8 as f64);
        }
        Ok(Batch {
            images: Tensor::new(&[c.n * b, 3, c.side, c.side], images)?,
            sers: Tensor::new(&[b, c.n], sers)?,
            targets: Tensor::new(&[b, c.m], targets)?,
            labels: Tensor::new(&[b, 2], labels)?,
        })
    }

    /// CNN stack up to the last convolutional activations.
    fn encode_on(&self, tape: &mut Tape, params: &Params, x: Var, mode: Mode) -> Result<Var> {
        let mut x = self.stem_conv.forward(tape, params, x)?;
        x = self.stem_bn.forward(tape, params, x, mode)?;
        x = tape.relu(x)?;
        if self.config.stem.max_pool {
            x = tape.max_pool2d(x, 3, 2, 1)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, params, x, mode)?;
        }
        Ok(x)
    }

    /// Full forward pass with explicit parameters.
    ///
    /// `images` is `(n·B)×3×S×S` year-major, `sers` is `B×n` in diopters.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &Params,
        images: Var,
        sers: Var,
        mode: Mode,
    ) -> Result<Outputs> {
        let c = &self.config;
        let (nb, ch, h, w) = tape.value(images).dims4("mmpn")?;
        let (b, n) = tape.value(sers).dims2("mmpn")?;
        if ch != 3 || h != c.side || w != c.side || n != c.n || nb != n * b {
            return Err(Error::Model(format!(
                "input shapes {:?} and {:?} do not fit side {} with n = {}",
                tape.value(images).shape(),
                tape.value(sers).shape(),
                c.side,
                c.n
            )));
        }
        let activations = self.encode_on(tape, params, images, mode)?;
        let features = tape.global_avg_pool(activations)?;

        let mean = params.value(self.ser_mean).data()[0];
        let std = params.value(self.ser_std).data()[0];
        let z = tape.affine(sers, 1.0 / std, -mean / std)?;

        let mut state = self.lstm.zero_state(tape, b)?;
        for t in 0..n {
            let f = tape.slice_rows(features, t * b, (t + 1) * b)?;
            let s = tape.slice_cols(z, t, t + 1)?;
            let step = tape.concat_cols(&[f, s])?;
            state = self.lstm.forward(tape, params, step, state)?;
        }
        let blank = tape.constant(Tensor::zeros(&[b, c.feature_len()]))?;
        let mut prev = tape.slice_cols(z, n - 1, n)?;
        let mut steps = Vec::with_capacity(c.m);
        for _ in 0..c.m {
            let step = tape.concat_cols(&[blank, prev])?;
            state = self.lstm.forward(tape, params, step, state)?;
            prev = self.reg_head.forward(tape, params, state.h)?;
            steps.push(prev);
        }
        let pred_z = if steps.len() == 1 { steps[0] } else { tape.concat_cols(&steps)? };
        let sers_out = tape.affine(pred_z, std, mean)?;
        let logits = self.cls_head.forward(tape, params, state.h)?;
        let probs = tape.sigmoid(logits)?;
        Ok(Outputs {
            images,
            activations,
            features,
            sers: sers_out,
            probs,
        })
    }

    /// Forward pass on a batch with the model's own parameters.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode, track_input: bool) -> Result<Outputs> {
        let images = if track_input {
            tape.input(batch.images.clone())?
        } else {
            tape.constant(batch.images.clone())?
        };
        let sers = tape.constant(batch.sers.clone())?;
        self.forward_with(tape, &self.params, images, sers, mode)
    }

    pub fn loss(tape: &mut Tape, out: &Outputs, targets: Var, labels: Var, kind: LossKind) -> Result<Var> {
        let bce = |tape: &mut Tape| -> Result<Var> {
            let mut terms = Vec::with_capacity(2);
            for k in 0..2 {
                let p = tape.slice_cols(out.probs, k, k + 1)?;
                let y = tape.slice_cols(labels, k, k + 1)?;
                terms.push(tape.bce_loss(p, y)?);
            }
            Ok(tape.add(terms[0], terms[1])?)
        };
        match kind {
            LossKind::Regression => Ok(tape.mse_loss(out.sers, targets)?),
            LossKind::Classification => bce(tape),
            LossKind::Joint { lambda_cls } => {
                let mse = tape.mse_loss(out.sers, targets)?;
                if lambda_cls == 0.0 {
                    return Ok(mse);
                }
                let cls = bce(tape)?;
                let cls = tape.affine(cls, lambda_cls, 0.0)?;
                Ok(tape.add(mse, cls)?)
            }
        }
    }

    /// Pooled feature vector of one image in eval mode.
    pub fn encode(&self, img: &EnhancedImage) -> Result<Vec<f64>> {
        if img.side() != self.config.side {
            return Err(Error::Model(format!(
                "image side {} does not match model side {}",
                img.side(),
                self.config.side
            )));
        }
        let data = img.data().iter().map(|&v| (v as f64 - INPUT_CENTER) / INPUT_SCALE).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3, img.side(), img.side()], data)?)?;
        let act = self.encode_on(&mut tape, &self.params, x, Mode::Eval)?;
        let f = tape.global_avg_pool(act)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Eval-mode predictions for a set of items in batches of `batch_size`.
    pub fn predict(&self, items: &[SeqItem], batch_size: usize) -> Result<Vec<PredictionResult>> {
        let refs: Vec<&SeqItem> = items.iter().collect();
        let mut out = Vec::with_capacity(items.len());
        for chunk in refs.chunks(batch_size.max(1)) {
            out.extend(self.predict_batch(chunk)?);
        }
        Ok(out)
    }

    pub fn predict_batch(&self, items: &[&SeqItem]) -> Result<Vec<PredictionResult>> {
        let batch = self.batch(items, None)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch, Mode::Eval, false)?;
        let m = self.config.m;
        let sers = tape.value(out.sers).data();
        let probs = tape.value(out.probs).data();
        Ok((0..items.len())
            .map(|b| PredictionResult {
                predicted_sers: sers[b * m..(b + 1) * m].to_vec(),
                p_myopia: probs[2 * b],
                p_high_myopia: probs[2 * b + 1],
            })
            .collect())
    }
}

// Training.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Regression and classification losses optimized together.
    #[default]
    Joint,
    /// Regression first; then the classification head alone on frozen
    /// features.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub batch_train: usize,
    pub batch_eval: usize,
    pub lambda_cls: f64,
    pub mode: TrainMode,
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            phases: vec![
                Phase { lr: 1e-3, epochs: 40, weight_decay: 0.0 },
                Phase { lr: 1e-4, epochs: 20, weight_decay: 1e-4 },
                Phase { lr: 1e-5, epochs: 10, weight_decay: 1e-4 },
            ],
            batch_train: 8,
            batch_eval: 2,
            lambda_cls: 0.5,
            mode: TrainMode::Joint,
            augment: true,
        }
    }
}

impl TrainSchedule {
    /// The default schedule with other epoch counts per phase.
    pub fn with_epochs(epochs: [usize; 3]) -> Self {
        let mut s = Self::default();
        for (p, e) in s.phases.iter_mut().zip(epochs) {
            p.epochs = e;
        }
        s
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.phases.is_empty() {
            return bad("schedule has no phases".into());
        }
        for p in &self.phases {
            if !(p.lr > 0.0) || !p.lr.is_finite() || !(p.weight_decay >= 0.0) {
                return bad(format!("invalid phase {p:?}"));
            }
        }
        if self.phases.windows(2).any(|w| w[1].lr >= w[0].lr) {
            return bad("phase learning rates must decrease".into());
        }
        if self.batch_train == 0 || self.batch_eval == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lambda_cls >= 0.0) || !self.lambda_cls.is_finite() {
            return bad(format!("lambda_cls must be ≥ 0, got {}", self.lambda_cls));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    /// 1-based phase index.
    pub phase: usize,
    /// 1-based epoch counter across all phases and stages.
    pub epoch: usize,
    pub phase_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
    /// Trained-classifier myopia accuracy at probability 0.5.
    pub val_accuracy: Option<f64>,
}

/// Mean and standard deviation of all input and target SERs.
fn ser_statistics(items: &[SeqItem]) -> (f64, f64) {
    let all: Vec<f64> = items
        .iter()
        .flat_map(|i| i.input_sers.iter().chain(&i.target_sers).copied())
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt();
    (mean, if std > 1e-6 { std } else { 1.0 })
}

fn bce_value(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub loss: f64,
    pub mae: f64,
    pub accuracy: f64,
}

impl Mmpn {
    /// Loss, MAE and myopia accuracy of eval-mode predictions.
    pub fn summarize(&self, items: &[SeqItem], batch_size: usize, kind: LossKind) -> Result<EvalSummary> {
        let preds = self.predict(items, batch_size)?;
        let (mut se, mut ae, mut bce, mut hits, mut count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (p, item) in preds.iter().zip(items) {
            for (a, t) in p.predicted_sers.iter().zip(&item.target_sers) {
                se += (a - t) * (a - t);
                ae += (a - t).abs();
                count += 1;
            }
            bce += bce_value(p.p_myopia, item.label_myopia) + bce_value(p.p_high_myopia, item.label_high_myopia);
            hits += ((p.p_myopia >= 0.5) == item.label_myopia) as usize;
        }
        let k = items.len() as f64;
        let mse = se / count as f64;
        let loss = match kind {
            LossKind::Regression => mse,
            LossKind::Classification => bce / k,
            LossKind::Joint { lambda_cls } => mse + lambda_cls * bce / k,
        };
        Ok(EvalSummary {
            loss,
            mae: ae / count as f64,
            accuracy: hits as f64 / k,
        })
    }

    /// Trains in place. Deterministic in `seed`: the shuffle order and the
    /// flips come from the `shuffle` and `augment` substreams.
    pub fn train(
        &mut self,
        train: &[SeqItem],
        val: &[SeqItem],
        schedule: &TrainSchedule,
        seed: u64,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        schedule.validate()?;
        if train.is_empty() {
            return Err(Error::Model("training set is empty".into()));
        }
        for item in train.iter().chain(val) {
            self.check_item(item)?;
            if item.target_sers.len() != self.config.m {
                return Err(Error::Model(format!("{}: missing targets", item.id)));
            }
        }
        let (mean, std) = ser_statistics(train);
        self.set_ser_stats(mean, std)?;

        let stages: Vec<(&str, LossKind)> = match schedule.mode {
            TrainMode::Joint => vec![("joint", LossKind::Joint { lambda_cls: schedule.lambda_cls })],
            TrainMode::TwoStage => vec![
                ("regression", LossKind::Regression),
                ("classification", LossKind::Classification),
            ],
        };
        let mut adam = Adam::new(&self.params, AdamConfig::default());
        let mut shuffle_rng = substream(seed, "shuffle");
        let mut augment_rng = substream(seed, "augment");
        let mut log = Vec::new();
        let mut epoch = 0;
        for &(stage, kind) in &stages {
            for (pi, phase) in schedule.phases.iter().enumerate() {
                for pe in 0..phase.epochs {
                    epoch += 1;
                    let mut order: Vec<usize> = (0..train.len()).collect();
                    order.shuffle(&mut shuffle_rng);
                    let (mut loss_sum, mut ae_sum, mut ae_count) = (0.0, 0.0, 0usize);
                    for (bi, chunk) in order.chunks(schedule.batch_train).enumerate() {
                        let items: Vec<&SeqItem> = chunk.iter().map(|&i| &train[i]).collect();
                        let flips: Option<Vec<(bool, bool)>> = schedule.augment.then(|| {
                            items
                                .iter()
                                .map(|_| (augment_rng.random_bool(0.5), augment_rng.random_bool(0.5)))
                                .collect()
                        });
                        let diverged = |source: NnError| Error::Divergence { epoch, batch: bi, source };
                        let lift = |e: Error| match e {
                            Error::Nn(source) => diverged(source),
                            other => other,
                        };
                        let batch = self.batch(&items, flips.as_deref())?;
                        let (loss, preds) = self
                            .train_step(&batch, kind, phase, &mut adam)
                            .map_err(lift)?;
                        if !loss.is_finite() {
                            return Err(diverged(NnError::NonFinite { op: "loss" }));
                        }
                        loss_sum += loss * items.len() as f64;
                        for (p, t) in preds.iter().zip(batch.targets.data()) {
                            ae_sum += (p - t).abs();
                            ae_count += 1;
                        }
                    }
                    let summary = if val.is_empty() {
                        None
                    } else {
                        Some(self.summarize(val, schedule.batch_eval, kind)?)
                    };
                    let entry = EpochLog {
                        stage: stage.to_string(),
                        phase: pi + 1,
                        epoch,
                        phase_epoch: pe + 1,
                        lr: phase.lr,
                        weight_decay: phase.weight_decay,
                        batch_size: schedule.batch_train,
                        train_loss: loss_sum / train.len() as f64,
                        train_mae: ae_sum / ae_count as f64,
                        val_loss: summary.map(|s| s.loss),
                        val_mae: summary.map(|s| s.mae),
                        val_accuracy: summary.map(|s| s.accuracy),
                    };
                    on_epoch(&entry);
                    log.push(entry);
                }
            }
        }
        Ok(log)
    }

    /// One optimizer step; returns the batch loss and train-mode predictions.
    fn train_step(
        &mut self,
        batch: &Batch,
        kind: LossKind,
        phase: &Phase,
        adam: &mut Adam,
    ) -> Result<(f64, Vec<f64>)> {
        // The classification stage trains on frozen features.
        let mode = if kind == LossKind::Classification { Mode::Eval } else { Mode::Train };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, mode, false)?;
        let targets = tape.constant(batch.targets.clone())?;
        let labels = tape.constant(batch.labels.clone())?;
        let loss = Self::loss(&mut tape, &out, targets, labels, kind)?;
        let grads = tape.backward(loss)?;
        self.params.zero_grads();
        grads.accumulate_into(&tape, &mut self.params)?;
        tape.apply_buffer_updates(&mut self.params)?;
        let only_cls = match kind {
            LossKind::Classification => Some(true),
            LossKind::Regression => Some(false),
            LossKind::Joint { .. } => None,
        };
        let is_cls = |name: &str| name.starts_with("head.classification");
        adam.step_filtered(&mut self.params, phase.lr, phase.weight_decay, |p| {
            only_cls.is_none_or(|c| is_cls(&p.name) == c)
        })?;
        Ok((tape.value(loss).item()?, tape.value(out.sers).data().to_vec()))
    }
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for entry in log {
        w.serialize(entry)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// Checkpoints.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMPN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Path of the config document stored next to a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: usize, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Checkpoint(format!("{what} {v} is implausible")));
        }
        Ok(v as usize)
    }
}

impl Mmpn {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(p.value.rank() as u64).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds a model for `config` and fills it from checkpoint bytes.
    pub fn from_checkpoint_bytes(config: MmpnConfig, bytes: &[u8]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = r.len(1 << 20, "parameter count")?;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, config defines {}",
                model.params.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = r.len(4096, "name length")?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let id = model
                .params
                .id(&name)
                .map_err(|_| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
            }
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.len(8, "rank")?;
            let shape = (0..rank)
                .map(|_| r.len(1 << 32, "dimension"))
                .collect::<Result<Vec<_>>>()?;
            if shape != model.params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {shape:?}, expected {:?}",
                    model.params.value(id).shape()
                )));
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.params.set_value(id, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    /// Writes the checkpoint and its config document.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&self.config).map_err(|e| Error::Toml(e.to_string()))?;
        let cfg = config_path(path);
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = config_path(path);
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config: MmpnConfig = toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(config, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use myopia_nn::grad_check_with_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_item(config: &MmpnConfig, rng: &mut ChaCha8Rng, id: usize) -> SeqItem {
        let s = config.side;
        let images = (0..config.n)
            .map(|_| EnhancedImage::new(s, (0..3 * s * s).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect();
        let base: f64 = rng.random_range(-3.0..1.0);
        let input_sers: Vec<f64> = (0..config.n).map(|t| base - 0.4 * t as f64).collect();
        let target_sers: Vec<f64> = (0..config.m)
            .map(|j| base - 0.4 * (config.n + j) as f64 + rng.random_range(-0.3..0.3))
            .collect();
        let last = *target_sers.last().unwrap();
        SeqItem {
            id: format!("item{id}"),
            images,
            input_sers,
            target_sers,
            label_myopia: last <= -0.5,
            label_high_myopia: last < -6.0,
        }
    }

    fn items(config: &MmpnConfig, k: usize, seed: u64) -> Vec<SeqItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|i| random_item(config, &mut rng, i)).collect()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Plain-loop LSTM step with gate order i, f, g, o.
    fn lstm_ref(p: &Params, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w_ih = p.by_name("lstm.w_ih").unwrap().value.data();
        let w_hh = p.by_name("lstm.w_hh").unwrap().value.data();
        let bias = p.by_name("lstm.bias").unwrap().value.data();
        let hs = h.len();
        let gate = |r: usize| {
            let mut v = bias[r];
            for (k, xk) in x.iter().enumerate() {
                v += w_ih[r * x.len() + k] * xk;
            }
            for (k, hk) in h.iter().enumerate() {
                v += w_hh[r * hs + k] * hk;
            }
            v
        };
        let mut h2 = vec![0.0; hs];
        let mut c2 = vec![0.0; hs];
        for u in 0..hs {
            let i = sigmoid(gate(u));
            let f = sigmoid(gate(hs + u));
            let g = gate(2 * hs + u).tanh();
            let o = sigmoid(gate(3 * hs + u));
            c2[u] = f * c[u] + i * g;
            h2[u] = o * c2[u].tanh();
        }
        (h2, c2)
    }

    fn linear_ref(p: &Params, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.by_name(&format!("{name}.weight")).unwrap().value.data();
        let b = p.by_name(&format!("{name}.bias")).unwrap().value.data();
        (0..b.len())
            .map(|o| b[o] + x.iter().enumerate().map(|(k, v)| w[o * x.len() + k] * v).sum::<f64>())
            .collect()
    }

    #[test]
    fn configs_validate() {
        assert!(MmpnConfig::default().validate().is_ok());
        let r34 = MmpnConfig::resnet34(224, 3, 2);
        assert!(r34.validate().is_ok());
        assert_eq!(r34.final_spatial(), 7);
        assert_eq!(r34.feature_len(), 512);
        assert_eq!(MmpnConfig::default().final_spatial(), 8);
        assert!(MmpnConfig::tiny(5, 1).validate().is_ok());
        assert!(MmpnConfig::tiny(3, 4).validate().is_err());
        assert!(MmpnConfig::tiny(0, 1).validate().is_err());
        let mut c = MmpnConfig::tiny(1, 1);
        c.stages[0].stride = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_model_size() {
        let model = Mmpn::new(MmpnConfig::default(), 1).unwrap();
        let n = model.parameter_count();
        assert!((150_000..300_000).contains(&n), "{n}");
    }

    #[test]
    fn parameter_names_are_unique_and_shapes_follow_config() {
        let c = MmpnConfig::tiny(2, 2);
        let model = Mmpn::new(c.clone(), 3).unwrap();
        let names: std::collections::BTreeSet<_> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names.len(), model.params.len());
        let w_ih = model.params.by_name("lstm.w_ih").unwrap();
        assert_eq!(w_ih.value.shape(), &[4 * c.lstm_hidden, c.feature_len() + 1]);
        assert_eq!(model.params.by_name("head.classification.weight").unwrap().value.shape(), &[2, 8]);
    }

    #[test]
    fn encoder_output_is_finite_and_sized() {
        let model = Mmpn::new(MmpnConfig::tiny(1, 1), 0).unwrap();
        let zero = EnhancedImage::new(16, vec![0.0; 3 * 256]).unwrap();
        let f = model.encode(&zero).unwrap();
        assert_eq!(f.len(), 8);
        assert!(f.iter().all(|v| v.is_finite()));
        let wrong = EnhancedImage::new(32, vec![0.0; 3 * 1024]).unwrap();
        assert!(model.encode(&wrong).is_err());
    }

    #[test]
    fn forward_matches_manual_unroll() {
        let c = MmpnConfig::tiny(3, 2);
        let mut model = Mmpn::new(c.clone(), 11).unwrap();
        model.set_ser_stats(-1.2, 1.7).unwrap();
        let its = items(&c, 3, 5);
        let preds = model.predict(&its, 3).unwrap();
        let (mean, std) = model.ser_stats();
        let p = &model.params;
        for (item, pred) in its.iter().zip(&preds) {
            let hs = c.lstm_hidden;
            let (mut h, mut cell) = (vec![0.0; hs], vec![0.0; hs]);
            for t in 0..c.n {
                let mut x = model.encode(&item.images[t]).unwrap();
                x.push((item.input_sers[t] - mean) / std);
                (h, cell) = lstm_ref(p, &x, &h, &cell);
            }
            let mut prev = (item.input_sers[c.n - 1] - mean) / std;
            for j in 0..c.m {
                let mut x = vec![0.0; c.feature_len()];
                x.push(prev);
                (h, cell) = lstm_ref(p, &x, &h, &cell);
                prev = linear_ref(p, "head.regression", &h)[0];
                assert!((pred.predicted_sers[j] - (prev * std + mean)).abs() < 1e-12);
            }
            let logits = linear_ref(p, "head.classification", &h);
            assert!((pred.p_myopia - sigmoid(logits[0])).abs() < 1e-12);
            assert!((pred.p_high_myopia - sigmoid(logits[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_one_half() {
        let c = MmpnConfig::tiny(1, 1);
        let mut model = Mmpn::new(c.clone(), 2).unwrap();
        for name in ["head.classification.weight", "head.classification.bias"] {
            let id = model.params.id(name).unwrap();
            model.params.get_mut(id).value.fill(0.0);
        }
        let p = model.predict(&items(&c, 2, 1), 2).unwrap();
        assert!(p.iter().all(|r| r.p_myopia == 0.5 && r.p_high_myopia == 0.5));
    }

    /// Central differences are only valid where no ReLU input lies within
    /// `h` of zero, so the check runs at fixed points verified to be clear
    /// of kinks. Smaller steps are swamped by roundoff on the ~1e-8 input
    /// gradients.
    fn end_to_end_check(mode: Mode, seed: u64) {
        let c = MmpnConfig::tiny(2, 2);
        let mut model = Mmpn::new(c.clone(), seed).unwrap();
        model.set_ser_stats(-1.0, 1.5).unwrap();
        let its = items(&c, 2, seed + 100);
        let refs: Vec<&SeqItem> = its.iter().collect();
        let batch = model.batch(&refs, None).unwrap();
        let arch = model.clone();
        let mut params = model.params.clone();
        let report = grad_check_with_params(
            |tape, params, vars| {
                let sers = tape.constant(batch.sers.clone())?;
                let t = tape.constant(batch.targets.clone())?;
                let l = tape.constant(batch.labels.clone())?;
                let out = arch
                    .forward_with(tape, params, vars[0], sers, mode)
                    .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
                Mmpn::loss(tape, &out, t, l, LossKind::Joint { lambda_cls: 0.5 })
                    .map_err(|e| NnError::InvalidArgument(e.to_string()))
            },
            &mut params,
            std::slice::from_ref(&batch.images),
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
        assert!(report.coordinates > 3000);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        end_to_end_check(Mode::Train, 3);
        end_to_end_check(Mode::Eval, 0);
    }

    fn quick_schedule(epochs: usize, lr: f64) -> TrainSchedule {
        TrainSchedule {
            phases: vec![Phase { lr, epochs, weight_decay: 0.0 }],
            batch_train: 8,
            batch_eval: 2,
            lambda_cls: 0.5,
            mode: TrainMode::Joint,
            augment: false,
        }
    }

    #[test]
    fn overfits_four_samples() {
        let c = MmpnConfig::tiny(2, 1);
        let mut model = Mmpn::new(c.clone(), 4).unwrap();
        let its = items(&c, 4, 9);
        let log = model.train(&its, &[], &quick_schedule(300, 1e-3), 1, |_| {}).unwrap();
        assert_eq!(log.len(), 300);
        let s = model.summarize(&its, 2, LossKind::Regression).unwrap();
        assert!(s.mae < 0.1, "train MAE {}", s.mae);
        let preds = model.predict(&its, 4).unwrap();
        for (p, it) in preds.iter().zip(&its) {
            assert!((p.predicted_sers[0] - it.target_sers[0]).abs() < 0.2);
        }

        // Reversing the input years changes the output.
        let reversed: Vec<SeqItem> = its
            .iter()
            .map(|it| SeqItem {
                images: it.images.iter().rev().cloned().collect(),
                input_sers: it.input_sers.iter().rev().copied().collect(),
                ..it.clone()
            })
            .collect();
        let rp = model.predict(&reversed, 4).unwrap();
        for (a, b) in preds.iter().zip(&rp) {
            assert!((a.predicted_sers[0] - b.predicted_sers[0]).abs() > 1e-6);
        }

        // Different images give different features.
        assert_ne!(model.encode(&its[0].images[0]).unwrap(), model.encode(&its[1].images[0]).unwrap());
    }

    #[test]
    fn batched_prediction_equals_single() {
        let c = MmpnConfig::tiny(2, 3);
        let mut model = Mmpn::new(c.clone(), 6).unwrap();
        let its = items(&c, 5, 2);
        model.train(&its, &[], &quick_schedule(3, 1e-3), 0, |_| {}).unwrap();
        let all = model.predict(&its, 5).unwrap();
        let single = model.predict(&its, 1).unwrap();
        for (a, b) in all.iter().zip(&single) {
            for (x, y) in a.predicted_sers.iter().zip(&b.predicted_sers) {
                assert!((x - y).abs() < 1e-6);
            }
            assert!((a.p_myopia - b.p_myopia).abs() < 1e-6);
        }
        assert_eq!(model.predict(&its, 2).unwrap(), model.predict(&its, 2).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let c = MmpnConfig::tiny(1, 2);
        let its = items(&c, 10, 3);
        let mut sched = quick_schedule(2, 1e-3);
        sched.augment = true;
        let run = || {
            let mut m = Mmpn::new(c.clone(), 7).unwrap();
            let log = m.train(&its, &its[..2], &sched, 5, |_| {}).unwrap();
            (m.checkpoint_bytes(), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn regression_loss_decreases_on_constant_targets() {
        let c = MmpnConfig::tiny(1, 1);
        let mut its = items(&c, 4, 12);
        for it in &mut its {
            it.target_sers = vec![-1.0];
            it.input_sers = vec![0.5];
        }
        // Inputs must vary for the standardization to be informative.
        its[0].input_sers = vec![-0.5];
        let mut model = Mmpn::new(c, 13).unwrap();
        let mut sched = quick_schedule(40, 1e-3);
        sched.lambda_cls = 0.0;
        let log = model.train(&its, &[], &sched, 2, |_| {}).unwrap();
        for w in log.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss, "{} > {}", w[1].train_loss, w[0].train_loss);
        }
    }

    #[test]
    fn paper_schedule_is_logged() {
        let c = MmpnConfig::tiny(1, 1);
        let its = items(&c, 3, 4);
        let mut model = Mmpn::new(c, 1).unwrap();
        let sched = TrainSchedule::default();
        let log = model.train(&its, &its[..1], &sched, 0, |_| {}).unwrap();
        assert_eq!(log.len(), 70);
        for (phase, lr, epochs, wd) in [(1, 1e-3, 40, 0.0), (2, 1e-4, 20, 1e-4), (3, 1e-5, 10, 1e-4)] {
            let rows: Vec<_> = log.iter().filter(|e| e.phase == phase).collect();
            assert_eq!(rows.len(), epochs);
            assert!(rows.iter().all(|e| e.lr == lr && e.weight_decay == wd && e.batch_size == 8));
        }
        assert!(log.iter().all(|e| e.val_mae.is_some()));
    }

    #[test]
    fn two_stage_mode_freezes_the_regressor_in_stage_two() {
        let c = MmpnConfig::tiny(1, 1);
        let its = items(&c, 4, 5);
        let mut model = Mmpn::new(c, 1).unwrap();
        let mut sched = quick_schedule(2, 1e-3);
        sched.mode = TrainMode::TwoStage;
        let mut snapshot = None;
        let mut stage_seen = Vec::new();
        let log = model
            .train(&its, &[], &sched, 0, |e| stage_seen.push(e.stage.clone()))
            .unwrap();
        assert_eq!(stage_seen, ["regression", "regression", "classification", "classification"]);
        assert_eq!(log.len(), 4);
        // Re-run stage two alone and compare the non-head weights.
        let mut adam = Adam::new(&model.params, AdamConfig::default());
        let before = model.params.clone();
        let refs: Vec<&SeqItem> = its.iter().collect();
        let batch = model.batch(&refs, None).unwrap();
        model
            .train_step(&batch, LossKind::Classification, &sched.phases[0], &mut adam)
            .unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
            if a.name.starts_with("head.classification") {
                snapshot = Some(a.value != b.value);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        assert_eq!(snapshot, Some(true));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let c = MmpnConfig::tiny(1, 1);
        let its = items(&c, 3, 5);
        let mut model = Mmpn::new(c, 1).unwrap();
        let mut sched = quick_schedule(1, 1e300);
        sched.batch_train = 1;
        match model.train(&its, &[], &sched, 0, |_| {}) {
            Err(Error::Divergence { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 1)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_mismatched_items() {
        let c = MmpnConfig::tiny(2, 1);
        let model = Mmpn::new(c.clone(), 1).unwrap();
        let mut it = items(&c, 1, 1).remove(0);
        it.images.pop();
        assert!(model.predict(&[it], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = MmpnConfig::tiny(2, 2);
        let mut model = Mmpn::new(c.clone(), 9).unwrap();
        model.set_ser_stats(-0.7, 1.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let back = Mmpn::load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        assert_eq!(back.checkpoint_bytes(), model.checkpoint_bytes());

        let bytes = model.checkpoint_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Mmpn::from_checkpoint_bytes(c.clone(), &bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Mmpn::from_checkpoint_bytes(c.clone(), &bad).is_err());
        assert!(Mmpn::from_checkpoint_bytes(c.clone(), &bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Mmpn::from_checkpoint_bytes(c.clone(), &longer).is_err());
        let mut wider = c.clone();
        wider.lstm_hidden = 9;
        assert!(Mmpn::from_checkpoint_bytes(wider, &bytes).is_err());
    }
}
