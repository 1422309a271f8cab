//! Layers that own parameter ids and emit tape ops.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, Params};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are queued for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Kaiming-uniform bound for ReLU networks: `√(6 / fan_in)`.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let w = Tensor::uniform(
            &[out_channels, in_channels, kernel, kernel],
            kaiming_bound(fan_in),
            rng,
        );
        let weight = params.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = Tensor::uniform(&[out_channels], 1.0 / (fan_in as f64).sqrt(), rng);
            Some(params.add(format!("{name}.bias"), b)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight)?;
        let b = self.bias.map(|b| tape.param(params, b)).transpose()?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: params
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: params
                .add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In [`Mode::Train`] the updated running statistics are queued on the
    /// tape; apply them with [`Tape::apply_buffer_updates`].
    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(params, self.gamma)?;
        let b = tape.param(params, self.beta)?;
        match mode {
            Mode::Eval => {
                let mean = params.value(self.running_mean).data().to_vec();
                let var = params.value(self.running_var).data().to_vec();
                tape.batch_norm(x, g, b, Some((&mean, &var)), self.eps)
            }
            Mode::Train => {
                let stats = tape.batch_stats(x)?;
                let out = tape.batch_norm(x, g, b, None, self.eps)?;
                let mom = self.momentum;
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                let rm = params.value(self.running_mean);
                let rv = params.value(self.running_var);
                let new_mean = rm
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(r, m)| (1.0 - mom) * r + mom * m)
                    .collect();
                let new_var = rv
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(r, v)| (1.0 - mom) * r + mom * v * unbias)
                    .collect();
                tape.record_buffer_update(self.running_mean, Tensor::new(rm.shape(), new_mean)?);
                tape.record_buffer_update(self.running_var, Tensor::new(rv.shape(), new_var)?);
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::uniform(&[out_features, in_features], kaiming_bound(in_features), rng);
        let weight = params.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            let bound = 1.0 / (in_features as f64).sqrt();
            Some(params.add(format!("{name}.bias"), Tensor::uniform(&[out_features], bound, rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight)?;
        let b = self.bias.map(|b| tape.param(params, b)).transpose()?;
        tape.linear(x, w, b)
    }
}

/// ResNet basic block: two 3×3 conv+BN layers and a skip connection.
///
/// When `downsample` is set, the first conv has stride 2 and the skip path is
/// a 1×1 stride-2 conv followed by BN. A channel change without downsampling
/// uses a 1×1 stride-1 projection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        downsample: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let stride = if downsample { 2 } else { 1 };
        let conv1 = Conv2d::new(
            params,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            1,
            false,
            rng,
        )?;
        let bn1 = BatchNorm2d::new(params, &format!("{name}.bn1"), out_channels)?;
        let conv2 = Conv2d::new(
            params,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            1,
            false,
            rng,
        )?;
        let bn2 = BatchNorm2d::new(params, &format!("{name}.bn2"), out_channels)?;
        let shortcut = if downsample || in_channels != out_channels {
            let conv = Conv2d::new(
                params,
                &format!("{name}.shortcut.conv"),
                in_channels,
                out_channels,
                1,
                stride,
                0,
                false,
                rng,
            )?;
            let bn = BatchNorm2d::new(params, &format!("{name}.shortcut.bn"), out_channels)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, params, x)?;
        let y = self.bn1.forward(tape, params, y, mode)?;
        let y = tape.relu(y)?;
        let y = self.conv2.forward(tape, params, y)?;
        let y = self.bn2.forward(tape, params, y, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, params, x)?;
                bn.forward(tape, params, s, mode)?
            }
            None => x,
        };
        if tape.value(skip).shape() != tape.value(y).shape() {
            return Err(shape_err(
                "residual_block",
                format!(
                    "skip {:?} vs body {:?}",
                    tape.value(skip).shape(),
                    tape.value(y).shape()
                ),
            ));
        }
        let s = tape.add(y, skip)?;
        tape.relu(s)
    }
}

/// Hidden and cell state of an LSTM, each `B×H`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single-layer LSTM cell with gate order `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Weights uniform in `±1/√hidden`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || input_size == 0 {
            return Err(NnError::InvalidArgument("LSTM sizes must be positive".into()));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: params.add(
                format!("{name}.w_ih"),
                Tensor::uniform(&[4 * hidden, input_size], bound, rng),
            )?,
            w_hh: params.add(
                format!("{name}.w_hh"),
                Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            )?,
            bias: params.add(format!("{name}.bias"), Tensor::uniform(&[4 * hidden], bound, rng))?,
            input_size,
            hidden,
        })
    }

    /// All-zero `(h, c)` for a batch of `batch` rows.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<LstmState> {
        Ok(LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden]))?,
            c: tape.constant(Tensor::zeros(&[batch, self.hidden]))?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let hsz = self.hidden;
        let w_ih = tape.param(params, self.w_ih)?;
        let w_hh = tape.param(params, self.w_hh)?;
        let b = tape.param(params, self.bias)?;
        let gx = tape.linear(x, w_ih, Some(b))?;
        let gh = tape.linear(state.h, w_hh, None)?;
        let gates = tape.add(gx, gh)?;
        let i = tape.slice_cols(gates, 0, hsz)?;
        let f = tape.slice_cols(gates, hsz, 2 * hsz)?;
        let g = tape.slice_cols(gates, 2 * hsz, 3 * hsz)?;
        let o = tape.slice_cols(gates, 3 * hsz, 4 * hsz)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn downsampling_block_halves_space_and_doubles_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Params::new();
        let block = ResidualBlock::new(&mut params, "b", 4, 8, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 4, 6, 6], 1.0, &mut rng)).unwrap();
        let y = block.forward(&mut tape, &params, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 3, 3]);
    }

    #[test]
    fn zero_weight_block_is_relu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = Params::new();
        let block = ResidualBlock::new(&mut params, "b", 3, 3, false, &mut rng).unwrap();
        for id in [block.conv1.weight, block.conv2.weight] {
            params.get_mut(id).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 3, 5, 5], 1.0, &mut rng)).unwrap();
        let y = block.forward(&mut tape, &params, x, Mode::Eval).unwrap();
        let expect = tape.value(x).map(|v| v.max(0.0));
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn batch_norm_train_queues_running_stat_updates() {
        let mut params = Params::new();
        let bn = BatchNorm2d::new(&mut params, "bn", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap())
            .unwrap();
        bn.forward(&mut tape, &params, x, Mode::Train).unwrap();
        tape.apply_buffer_updates(&mut params).unwrap();
        // mean 3, unbiased variance 14/3
        let rm = params.value(bn.running_mean).data()[0];
        let rv = params.value(bn.running_var).data()[0];
        assert!((rm - 0.3).abs() < 1e-15);
        assert!((rv - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_lstm_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = Params::new();
        let cell = LstmCell::new(&mut params, "lstm", 3, 2, &mut rng).unwrap();
        for id in [cell.w_ih, cell.w_hh, cell.bias] {
            params.get_mut(id).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng)).unwrap();
        let h = tape.constant(Tensor::uniform(&[1, 2], 1.0, &mut rng)).unwrap();
        let c0 = vec![0.8, -1.4];
        let c = tape.constant(Tensor::new(&[1, 2], c0.clone()).unwrap()).unwrap();
        let s = cell.forward(&mut tape, &params, x, LstmState { h, c }).unwrap();
        for (j, &cv) in c0.iter().enumerate() {
            assert_eq!(tape.value(s.c).data()[j], 0.5 * cv);
            assert_eq!(tape.value(s.h).data()[j], 0.5 * (0.5 * cv).tanh());
        }
    }

    #[test]
    fn zero_state_zero_input_gives_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let cell = LstmCell::new(&mut params, "lstm", 4, 3, &mut rng).unwrap();
        params.get_mut(cell.bias).value.fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let s0 = cell.zero_state(&mut tape, 2).unwrap();
        let s = cell.forward(&mut tape, &params, x, s0).unwrap();
        assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
    }
}
