#![allow(
    clippy::excessive_precision,
    clippy::needless_range_loop,
    clippy::cloned_ref_to_slice_refs
)]

use fmr_core::autodiff::{Result, Sgd, SgdConfig, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        true,
    )
    .unwrap()
}

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    k: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Worst relative error between analytic and central-difference gradients
/// of `sum(build(inputs) ⊙ R)` for a fixed random `R`.
fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let h = 1e-5;
    let eval = |inputs: &[Tensor], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let r = tape
            .constant(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
            .unwrap();
        let weighted = tape.mul(out, r).unwrap();
        let loss = tape.sum_all(weighted);
        let value = tape.scalar(loss);
        if !want_grads {
            return (value, vec![]);
        }
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .map(|&v| grads.get(v).unwrap().to_vec())
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..ga.len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + h;
            let up = eval(&work, false).0;
            work[i].values_mut()[j] = orig - h;
            let down = eval(&work, false).0;
            work[i].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (ga[j] - numeric).abs() / ga[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 64, 10)] {
        let a = uniform(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, n], -1.0, 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(va, vb).unwrap();
        let oracle = matmul_oracle(a.values(), b.values(), m, k, n);
        for (x, y) in tape.value(c).iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut r = rng(2);
    for (dims, kdims, stride, pad) in [
        ((1, 1, 5, 5), (1, 3, 3), 1, 0),
        ((2, 3, 7, 6), (4, 3, 3), 1, 1),
        ((2, 2, 8, 8), (3, 3, 3), 2, 1),
        ((1, 3, 9, 7), (2, 2, 4), 3, 2),
    ] {
        let (n, c, h, w) = dims;
        let (o, kh, kw) = kdims;
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let k = uniform(&mut r, &[o, c, kh, kw], -1.0, 1.0);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.leaf(&x), tape.leaf(&k));
        let y = tape.conv2d(vx, vk, stride, pad).unwrap();
        let (oracle, oh, ow) = conv_oracle(x.values(), k.values(), dims, kdims, stride, pad);
        assert_eq!(tape.shape(y), &[n, o, oh, ow]);
        for (a, b) in tape.value(y).iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let x = Tensor::zeros(vec![1, 1, 3, 3]);
    let k = Tensor::zeros(vec![1, 1, 5, 5]);
    let mut tape = Tape::new();
    let (vx, vk) = (tape.leaf(&x), tape.leaf(&k));
    assert!(matches!(
        tape.conv2d(vx, vk, 1, 0),
        Err(TensorError::KernelTooLarge { .. })
    ));
    assert!(tape.conv2d(vx, vk, 1, 1).is_ok());
}

#[test]
fn softmax_oracle_values() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let p = tape.softmax(z, 1).unwrap();
    let expected = [
        0.0900305731703804580,
        0.244728471054797652,
        0.665240955774821890,
    ];
    for (a, b) in tape.value(p).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let z = tape
        .constant(vec![1, 4], vec![10.0, 0.0, 0.0, 0.0])
        .unwrap();
    let p = tape.softmax(z, 1).unwrap();
    let expected = [
        0.999863818758568933,
        4.53937471436889131e-5,
        4.53937471436889131e-5,
        4.53937471436889131e-5,
    ];
    for (a, b) in tape.value(p).iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn elementwise_and_linear_gradients() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let m = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let bias = uniform(&mut r, &[4], -1.0, 1.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let checks: Vec<(&str, f64)> = vec![
        (
            "add",
            grad_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            grad_check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            grad_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        ),
        (
            "matmul",
            grad_check(&[a.clone(), m.clone()], |t, v| t.matmul(v[0], v[1])),
        ),
        (
            "transpose",
            grad_check(&[a.clone()], |t, v| t.transpose(v[0])),
        ),
        (
            "row_bias",
            grad_check(&[a.clone(), bias.clone()], |t, v| {
                t.add_row_bias(v[0], v[1])
            }),
        ),
        (
            "scale",
            grad_check(&[a.clone()], |t, v| Ok(t.scale(v[0], -2.5))),
        ),
        ("exp", grad_check(&[a.clone()], |t, v| Ok(t.exp(v[0])))),
        ("log", grad_check(&[pos.clone()], |t, v| t.log(v[0]))),
        (
            "sum_all",
            grad_check(&[a.clone()], |t, v| Ok(t.sum_all(v[0]))),
        ),
        (
            "mean_all",
            grad_check(&[a.clone()], |t, v| Ok(t.mean_all(v[0]))),
        ),
        (
            "sum_axis0",
            grad_check(&[a.clone()], |t, v| t.sum_axis(v[0], 0)),
        ),
        (
            "mean_axis1",
            grad_check(&[a.clone()], |t, v| t.mean_axis(v[0], 1)),
        ),
    ];
    for (name, worst) in checks {
        assert!(worst <= 1e-5, "{name}: {worst:e}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut r = rng(4);
    let mut x = uniform(&mut r, &[4, 6], -1.0, 1.0);
    for v in x.values_mut() {
        if v.abs() < 0.1 {
            *v += 0.2_f64.copysign(*v);
        }
    }
    assert!(grad_check(&[x], |t, v| Ok(t.relu(v[0]))) <= 1e-5);
}

#[test]
fn softmax_family_gradients() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[3, 5], -3.0, 3.0);
    let x3 = uniform(&mut r, &[2, 3, 4], -3.0, 3.0);
    for axis in 0..2 {
        assert!(grad_check(&[x.clone()], |t, v| t.softmax(v[0], axis)) <= 1e-5);
        assert!(grad_check(&[x.clone()], |t, v| t.log_softmax(v[0], axis)) <= 1e-5);
    }
    for axis in 0..3 {
        assert!(grad_check(&[x3.clone()], |t, v| t.softmax(v[0], axis)) <= 1e-5);
        assert!(grad_check(&[x3.clone()], |t, v| t.sum_axis(v[0], axis)) <= 1e-5);
    }
    let labels = [0, 4, 2];
    assert!(grad_check(&[x.clone()], |t, v| t.cross_entropy(v[0], &labels)) <= 1e-5);
}

#[test]
fn spatial_gradients() {
    let mut r = rng(6);
    let x = uniform(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
    let k = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let cb = uniform(&mut r, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let worst = grad_check(&[x.clone(), k.clone()], |t, v| {
            t.conv2d(v[0], v[1], stride, pad)
        });
        assert!(worst <= 1e-5, "stride {stride} pad {pad}: {worst:e}");
    }
    assert!(grad_check(&[x.clone(), cb], |t, v| t.add_channel_bias(v[0], v[1])) <= 1e-5);
    assert!(grad_check(&[x], |t, v| t.global_avg_pool(v[0])) <= 1e-5);
}

#[test]
fn three_layer_mlp_gradient() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let w1 = uniform(&mut r, &[4, 6], -1.0, 1.0);
    let w2 = uniform(&mut r, &[6, 6], -1.0, 1.0);
    let w3 = uniform(&mut r, &[6, 3], -1.0, 1.0);
    let b1 = uniform(&mut r, &[6], -1.0, 1.0);
    let worst = grad_check(&[x, w1, w2, w3, b1], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row_bias(h, v[4])?;
        let h = t.relu(h);
        let h = t.matmul(h, v[2])?;
        let h = t.relu(h);
        let logits = t.matmul(h, v[3])?;
        t.cross_entropy(logits, &[0, 1, 2, 1, 0])
    });
    assert!(worst <= 1e-5, "{worst:e}");
}

#[test]
fn reused_tape_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0], true).unwrap());
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
    assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
}

#[test]
fn sgd_two_steps_on_quadratic_bowl() {
    // loss = 0.5 * a * w^2, gradient a * w.
    let (a, lr, mom, wd) = (3.0, 0.1, 0.9, 0.01);
    let mut w = Tensor::new(vec![1], vec![2.0], true).unwrap();
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: lr,
        momentum: mom,
        weight_decay: wd,
    })
    .unwrap();
    let (mut hw, mut hv) = (2.0f64, 0.0f64);
    for _ in 0..2 {
        let g = a * w.values()[0];
        w.set_grad(vec![g]).unwrap();
        sgd.step(&mut [&mut w]).unwrap();
        hv = mom * hv + a * hw + wd * hw;
        hw -= lr * hv;
    }
    // 2 -> 2 - 0.1*(6.02) = 1.398; v = 0.9*6.02 + 4.194 + 0.01398 = 9.62598
    assert!((hw - (1.398 - 0.1 * 9.62598)).abs() < 1e-12);
    assert!((w.values()[0] - hw).abs() < 1e-15);
    assert!(w.grad().is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[rows, cols], -50.0, 50.0);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let p = tape.softmax(v, 1).unwrap();
        for row in tape.value(p).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&q| q > 0.0 && q <= 1.0));
        }
    }

    #[test]
    fn softmax_shift_invariance(cols in 2usize..9, c in -100.0f64..100.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, cols], -5.0, 5.0);
        let shifted: Vec<f64> = x.values().iter().map(|v| v + c).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.constant(vec![2, cols], shifted).unwrap();
        let pa = tape.softmax(a, 1).unwrap();
        let pb = tape.softmax(b, 1).unwrap();
        for (u, w) in tape.value(pa).iter().zip(tape.value(pb)) {
            prop_assert!((u - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_oracle_property(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform(&mut r, &[k, n], -1.0, 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(va, vb).unwrap();
        let oracle = matmul_oracle(a.values(), b.values(), m, k, n);
        for (x, y) in tape.value(c).iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_oracle_property(
        c in 1usize..3, o in 1usize..3, h in 3usize..8, w in 3usize..8,
        kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, c, h, w], -1.0, 1.0);
        let k = uniform(&mut r, &[o, c, kh, kw], -1.0, 1.0);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.leaf(&x), tape.leaf(&k));
        let y = tape.conv2d(vx, vk, stride, pad).unwrap();
        let (oracle, _, _) = conv_oracle(x.values(), k.values(), (2, c, h, w), (o, kh, kw), stride, pad);
        prop_assert_eq!(tape.value(y).len(), oracle.len());
        for (a, b) in tape.value(y).iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(cols in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, cols], -20.0, 20.0);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let p = tape.softmax(v, 1).unwrap();
        let lp = tape.log_softmax(v, 1).unwrap();
        for (a, b) in tape.value(p).iter().zip(tape.value(lp)) {
            prop_assert!((a.ln() - b).abs() <= 1e-9);
        }
    }
}
