//! Reverse-mode gradients against central finite differences (64-bit).

use myopia_nn::{
    grad_check, grad_check_with_params, LstmCell, LstmState, Mode, Params, ResidualBlock, Result,
    Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

/// Reduces any var to a scalar with fixed, non-uniform weights so every
/// output coordinate carries an O(1) gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7137 + 0.4).sin() + 0.3).collect();
    let w = tape.constant(Tensor::new(&shape, w)?)?;
    let m = tape.mul(v, w)?;
    tape.sum(m)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn assert_ok(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: max rel err {err:e} ≥ {tol:e}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for shape in [vec![3], vec![2, 5], vec![2, 3, 2, 2]] {
        let a = rand_t(&mut rng, &shape);
        let b = rand_t(&mut rng, &shape);
        type Op = fn(&mut Tape, Var, Var) -> Result<Var>;
        let ops: [(&str, Op); 9] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("affine", |t, a, _| t.affine(a, -1.7, 0.3)),
            ("relu", |t, a, _| t.relu(a)),
            ("sigmoid", |t, a, _| t.sigmoid(a)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("sum", |t, a, _| t.sum(a)),
            ("mean", |t, a, _| t.mean(a)),
        ];
        for (name, op) in ops {
            let r = grad_check(
                |t, v| {
                    let y = op(t, v[0], v[1])?;
                    weighted_sum(t, y)
                },
                &[a.clone(), b.clone()],
                H,
            )
            .unwrap();
            assert_ok(name, r.max_rel_error, OP_TOL);
        }
    }
}

#[test]
fn conv2d_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 1),
        ([2, 3, 6, 7], [2, 3, 3, 3], 2, 1),
        ([2, 1, 4, 4], [4, 1, 1, 1], 2, 0),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = rand_t(&mut rng, &xs);
        let w = rand_t(&mut rng, &ws);
        let b = rand_t(&mut rng, &[ws[0]]);
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(t, y)
            },
            &[x, w, b],
            H,
        )
        .unwrap();
        assert_ok("conv2d", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for shape in [[2, 3, 3, 3], [1, 2, 4, 4], [3, 1, 2, 3]] {
        let c = shape[1];
        let x = rand_t(&mut rng, &shape);
        let g = rand_t(&mut rng, &[c]);
        let b = rand_t(&mut rng, &[c]);
        let r = grad_check(
            |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                weighted_sum(t, y)
            },
            &[x.clone(), g.clone(), b.clone()],
            H,
        )
        .unwrap();
        assert_ok("batch_norm/train", r.max_rel_error, OP_TOL);

        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        let r = grad_check(
            |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?;
                weighted_sum(t, y)
            },
            &[x, g, b],
            H,
        )
        .unwrap();
        assert_ok("batch_norm/eval", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn pooling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in [[1, 2, 4, 4], [2, 1, 5, 6], [1, 3, 7, 7]] {
        let x = rand_t(&mut rng, &shape);
        for (size, stride, pad) in [(2, 2, 0), (3, 2, 1)] {
            let r = grad_check(
                |t, v| {
                    let y = t.max_pool2d(v[0], size, stride, pad)?;
                    weighted_sum(t, y)
                },
                std::slice::from_ref(&x),
                H,
            )
            .unwrap();
            assert_ok("max_pool2d", r.max_rel_error, OP_TOL);
        }
        let r = grad_check(
            |t, v| {
                let y = t.global_avg_pool(v[0])?;
                weighted_sum(t, y)
            },
            &[x],
            H,
        )
        .unwrap();
        assert_ok("global_avg_pool", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn linear_is_exact_to_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (rows, din, dout) in [(1, 3, 2), (4, 5, 3), (2, 8, 6)] {
        let x = rand_t(&mut rng, &[rows, din]);
        let w = rand_t(&mut rng, &[dout, din]);
        let b = rand_t(&mut rng, &[dout]);
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(t, y)
            },
            &[x, w, b],
            H,
        )
        .unwrap();
        assert_ok("linear", r.max_rel_error, 1e-7);
    }
}

#[test]
fn slicing_and_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (rows, c1, c2) in [(1, 2, 3), (3, 4, 1), (2, 5, 5)] {
        let a = rand_t(&mut rng, &[rows, c1]);
        let b = rand_t(&mut rng, &[rows, c2]);
        let r = grad_check(
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                let s = t.slice_cols(y, 1, c1 + c2)?;
                let z = t.tanh(s)?;
                weighted_sum(t, z)
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert_ok("concat/slice_cols", r.max_rel_error, OP_TOL);
    }
    for shape in [vec![4, 3], vec![3, 2, 2, 2], vec![5]] {
        let x = rand_t(&mut rng, &shape);
        let r = grad_check(
            |t, v| {
                let y = t.slice_rows(v[0], 1, 3)?;
                weighted_sum(t, y)
            },
            &[x],
            H,
        )
        .unwrap();
        assert_ok("slice_rows", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for shape in [vec![1], vec![4], vec![3, 2]] {
        let p = rand_t(&mut rng, &shape);
        let q = rand_t(&mut rng, &shape);
        let r = grad_check(|t, v| t.mse_loss(v[0], v[1]), &[p, q], H).unwrap();
        assert_ok("mse_loss", r.max_rel_error, OP_TOL);

        let n: usize = shape.iter().product();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = grad_check(
            |t, v| t.bce_loss(v[0], v[1]),
            &[
                Tensor::new(&shape, probs).unwrap(),
                Tensor::new(&shape, labels).unwrap(),
            ],
            H,
        )
        .unwrap();
        assert_ok("bce_loss", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn lstm_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for (batch, input, hidden) in [(1, 3, 2), (2, 4, 3), (3, 2, 5)] {
        let mut params = Params::new();
        let cell = LstmCell::new(&mut params, "lstm", input, hidden, &mut rng).unwrap();
        let x = rand_t(&mut rng, &[batch, input]);
        let h = rand_t(&mut rng, &[batch, hidden]);
        let c = rand_t(&mut rng, &[batch, hidden]);
        let r = grad_check_with_params(
            |t, p, v| {
                let s = cell.forward(t, p, v[0], LstmState { h: v[1], c: v[2] })?;
                let hc = t.concat_cols(&[s.h, s.c])?;
                weighted_sum(t, hc)
            },
            &mut params,
            &[x, h, c],
            H,
        )
        .unwrap();
        assert_ok("lstm_cell", r.max_rel_error, OP_TOL);
    }
}

#[test]
fn residual_block_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for (downsample, out_c) in [(false, 4), (true, 8), (false, 6)] {
        let mut params = Params::new();
        let block = ResidualBlock::new(&mut params, "b", 4, out_c, downsample, &mut rng).unwrap();
        let x = rand_t(&mut rng, &[1, 4, 6, 6]);
        let r = grad_check_with_params(
            |t, p, v| {
                let y = block.forward(t, p, v[0], Mode::Train)?;
                weighted_sum(t, y)
            },
            &mut params,
            &[x],
            H,
        )
        .unwrap();
        assert_ok("residual_block", r.max_rel_error, OP_TOL);
        assert!(r.coordinates > 144);
    }
}
