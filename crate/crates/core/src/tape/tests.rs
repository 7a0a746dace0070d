use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f` with respect to each of `inputs`.
/// `f` gets fresh leaves on a fresh tape and returns a scalar node.
fn check_grads(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();

    let eval = |ts: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        tape.item(f(&tape, &vars))
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
fn weighted(tape: &Tape, v: Var) -> Var {
    let shape = tape.shape(v);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    let w = tape.constant(w);
    tape.sum_all(tape.hadamard(v, w).unwrap())
}

#[test]
fn matmul_hand_example() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[&[0.0], &[1.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    assert_eq!(tape.shape(c), vec![2, 1]);
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let m = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 7.0]]);
    let i = tape.constant(Tensor::identity(2));
    let mv = tape.constant(m.clone());
    assert_eq!(tape.value(tape.matmul(i, mv).unwrap()), m);
}

#[test]
fn matmul_rejects_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let err = check_grads(&[a, b], |t, v| t.sum_all(t.matmul(v[0], v[1]).unwrap()));
    assert!(err < 1e-6, "{err}");
    let (x, w) = (random(&[4], &mut rng), random(&[4, 3], &mut rng));
    let err = check_grads(&[x, w], |t, v| weighted(t, t.matmul(v[0], v[1]).unwrap()));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn transpose_values_and_gradient() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let t = tape.value(tape.transpose(a).unwrap());
    assert_eq!(t.shape(), &[3, 2]);
    assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[2, 3], &mut rng);
    let err = check_grads(&[x], |t, v| weighted(t, t.transpose(v[0]).unwrap()));
    assert!(err < 1e-6);
}

#[test]
fn hadamard_values_and_gradient() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(tape.value(tape.hadamard(a, b).unwrap()).data(), &[3.0, 8.0]);
    let ones = tape.constant(Tensor::ones(&[2]));
    assert_eq!(tape.value(tape.hadamard(a, ones).unwrap()).data(), &[1.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = (random(&[2, 3], &mut rng), random(&[2, 3], &mut rng));
    let err = check_grads(&[x, y], |t, v| weighted(t, t.hadamard(v[0], v[1]).unwrap()));
    assert!(err < 1e-6, "{err}");
    assert!(matches!(
        tape.hadamard(a, tape.constant(Tensor::ones(&[3]))),
        Err(Error::Shape(_))
    ));
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(tape.value(tape.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(tape.item(tape.tanh(z).unwrap()), 0.0);
    assert_eq!(tape.item(tape.sigmoid(z).unwrap()), 0.5);
    assert!(matches!(tape.log(x), Err(Error::Domain(_))));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3], &mut rng);
    for f in [
        Unary::Tanh,
        Unary::Relu,
        Unary::Sigmoid,
        Unary::Scale(-1.7),
        Unary::Shift(0.4),
    ] {
        let err = check_grads(std::slice::from_ref(&x), |t, v| weighted(t, t.unary(v[0], f).unwrap()));
        assert!(err < 1e-6, "{f:?}: {err}");
    }
    let pos = x.map(|v| v.abs() + 0.5);
    let err = check_grads(&[pos], |t, v| weighted(t, t.log(v[0]).unwrap()));
    assert!(err < 1e-6, "log: {err}");
}

#[test]
fn softmax_values() {
    let tape = Tape::new();
    let one = tape.constant(Tensor::vector(vec![3.0]));
    assert_eq!(tape.value(tape.softmax(one, 0).unwrap()).data(), &[1.0]);
    let eq = tape.constant(Tensor::vector(vec![2.0; 4]));
    assert!(tape
        .value(tape.softmax(eq, 0).unwrap())
        .data()
        .iter()
        .all(|&p| (p - 0.25).abs() < 1e-15));
    assert!(tape.softmax(eq, 1).is_err());
}

#[test]
fn softmax_gradient_both_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4], &mut rng);
    for axis in [0, 1] {
        let err = check_grads(std::slice::from_ref(&x), |t, v| {
            weighted(t, t.softmax(v[0], axis).unwrap())
        });
        assert!(err < 1e-6, "axis {axis}: {err}");
    }
}

#[test]
fn maxpool_values_and_ties() {
    let tape = Tape::new();
    let m = tape.leaf(Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]), true);
    let cols = tape.maxpool(m, 0).unwrap();
    assert_eq!(tape.value(cols).data(), &[3.0, 5.0]);
    let single = tape.constant(Tensor::from_rows(&[&[4.0, -1.0]]));
    assert_eq!(tape.value(tape.maxpool(single, 0).unwrap()).data(), &[4.0, -1.0]);

    let tape = Tape::new();
    let tied = tape.leaf(Tensor::vector(vec![2.0, 2.0, 1.0]), true);
    let m = tape.maxpool(tied, 0).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(tied).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradient_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 3], &mut rng);
    for axis in [0, 1] {
        let err = check_grads(std::slice::from_ref(&x), |t, v| {
            weighted(t, t.maxpool(v[0], axis).unwrap())
        });
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn elem_max_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Tensor> = (0..3).map(|_| random(&[2, 3], &mut rng)).collect();
    let err = check_grads(&xs, |t, v| weighted(t, t.elem_max(v).unwrap()));
    assert!(err < 1e-6, "{err}");
}

/// Straight nested-loop convolution with zero padding.
fn conv_oracle(seq: &Tensor, filter: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (m, din) = (seq.shape()[0], seq.shape()[1]);
    let (len, dout) = (filter.shape()[0], filter.shape()[2]);
    let mut out = vec![0.0; m * dout];
    for i in 0..m {
        for o in 0..dout {
            let mut acc = bias.data()[o];
            for t in 0..len {
                let p = i as isize - (len / 2) as isize + t as isize;
                if p < 0 || p >= m as isize {
                    continue;
                }
                for c in 0..din {
                    acc += seq.data()[p as usize * din + c] * filter.data()[(t * din + c) * dout + o];
                }
            }
            out[i * dout + o] = acc;
        }
    }
    out
}

#[test]
fn conv_identity_filter() {
    let tape = Tape::new();
    let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -4.0], &[0.5, 0.0]]);
    let f = Tensor::new(vec![1, 2, 2], Tensor::identity(2).into_data()).unwrap();
    let out = tape
        .conv1d_same(
            tape.constant(x.clone()),
            tape.constant(f),
            tape.constant(Tensor::zeros(&[2])),
        )
        .unwrap();
    assert_eq!(tape.value(out), x);
}

#[test]
fn conv_single_word_uses_center_tap_only() {
    let tape = Tape::new();
    let x = Tensor::from_rows(&[&[2.0]]);
    let f = Tensor::new(vec![3, 1, 1], vec![10.0, 1.0, 100.0]).unwrap();
    let out = tape
        .conv1d_same(tape.constant(x), tape.constant(f), tape.constant(Tensor::zeros(&[1])))
        .unwrap();
    assert_eq!(tape.value(out).data(), &[2.0]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for len in 1..=4 {
        let seq = random(&[5, 3], &mut rng);
        let filter = random(&[len, 3, 2], &mut rng);
        let bias = random(&[2], &mut rng);
        let tape = Tape::new();
        let out = tape
            .conv1d_same(
                tape.constant(seq.clone()),
                tape.constant(filter.clone()),
                tape.constant(bias.clone()),
            )
            .unwrap();
        let expected = conv_oracle(&seq, &filter, &bias);
        let got = tape.value(out);
        assert_eq!(got.shape(), &[5, 2]);
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
        let err = check_grads(&[seq, filter, bias], |t, v| {
            weighted(t, t.conv1d_same(v[0], v[1], v[2]).unwrap())
        });
        assert!(err < 1e-6, "L={len}: {err}");
    }
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert_eq!(tape.item(tape.sum(v, 0).unwrap()), 6.0);
    let rows = tape.constant(Tensor::from_rows(&[&[1.0, -2.0], &[1.0, -2.0], &[1.0, -2.0]]));
    assert_eq!(tape.value(tape.mean(rows, 0).unwrap()).data(), &[1.0, -2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 4], &mut rng);
    for axis in [0, 1] {
        let err = check_grads(std::slice::from_ref(&x), |t, v| {
            weighted(t, t.mean(v[0], axis).unwrap())
        });
        assert!(err < 1e-6);
        let err = check_grads(std::slice::from_ref(&x), |t, v| weighted(t, t.sum(v[0], axis).unwrap()));
        assert!(err < 1e-6);
    }
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = random(&[5, 3], &mut rng);
    let err = check_grads(std::slice::from_ref(&table), |t, v| {
        weighted(t, t.index_select(v[0], &[4, 1, 4]).unwrap())
    });
    assert!(err < 1e-6);
    let err = check_grads(std::slice::from_ref(&table), |t, v| {
        weighted(t, t.reshape(v[0], vec![15]).unwrap())
    });
    assert!(err < 1e-6);
    let (a, b) = (random(&[3], &mut rng), random(&[3], &mut rng));
    let err = check_grads(&[a.clone(), b.clone()], |t, v| weighted(t, t.stack(v).unwrap()));
    assert!(err < 1e-6);
    let err = check_grads(&[a.clone(), b.clone()], |t, v| weighted(t, t.sub(v[0], v[1]).unwrap()));
    assert!(err < 1e-6);
    let (x, bias) = (random(&[4, 3], &mut rng), random(&[3], &mut rng));
    let err = check_grads(&[x.clone(), bias], |t, v| weighted(t, t.add_bias(v[0], v[1]).unwrap()));
    assert!(err < 1e-6);
    let s = random(&[4], &mut rng);
    let err = check_grads(&[x.clone(), s], |t, v| weighted(t, t.scale_rows(v[0], v[1]).unwrap()));
    assert!(err < 1e-6);
    let c = Tensor::scalar(0.7);
    let err = check_grads(&[x, c], |t, v| weighted(t, t.scale_by(v[0], v[1]).unwrap()));
    assert!(err < 1e-6);
    let pos = a.map(|v| v.abs() + 0.2);
    let err = check_grads(&[pos], |t, v| weighted(t, t.normalize_sum(v[0]).unwrap()));
    assert!(err < 1e-6);
    let ids = tape_lookup_error();
    assert!(matches!(ids, Err(Error::Lookup(_))));
}

fn tape_lookup_error() -> Result<Var> {
    let tape = Tape::new();
    let t = tape.constant(Tensor::zeros(&[2, 2]));
    tape.index_select(t, &[2])
}

#[test]
fn normalize_sum_guards_zero_denominator() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
    assert!(matches!(tape.normalize_sum(x), Err(Error::DegenerateAttention { .. })));
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[4, 3], &mut rng);
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    let err = check_grads(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        weighted(t, t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0)
    });
    assert!(err < 1e-5, "train: {err}");
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let err = check_grads(&[x, gamma, beta], |t, v| {
        weighted(t, t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap())
    });
    assert!(err < 1e-6, "eval: {err}");
}

#[test]
fn batch_norm_rejects_single_row() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.batch_norm_train(x, g, b, 1e-5),
        Err(Error::BatchTooSmall(1))
    ));
}

#[test]
fn bce_gradient() {
    let p = Tensor::vector(vec![0.9, 0.2, 0.35, 0.6]);
    let targets = [1.0, 0.0, 0.0, 1.0];
    let err = check_grads(&[p], |t, v| t.binary_cross_entropy(v[0], &targets).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basic_and_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let loss = tape.sum_all(tape.hadamard(x, c).unwrap());
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn fault_injection_corrupts_gradient() {
    let tape = Tape::with_fault(OpTag::Tanh);
    let x = tape.leaf(Tensor::scalar(0.3), true);
    let y = tape.tanh(x).unwrap();
    let g = tape.backward(y).unwrap();
    let exact = 1.0 - 0.3f64.tanh().powi(2);
    assert!((g.get(x).unwrap().item() - exact * FAULT_FACTOR).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-30.0f64..30.0, 6)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vals).unwrap());
        for axis in [0, 1] {
            let y = tape.value(tape.softmax(x, axis).unwrap());
            prop_assert!(y.data().iter().all(|&p| p > 0.0));
            let (count, len, idx) = lanes(y.shape(), axis).unwrap();
            for lane in 0..count {
                let s: f64 = (0..len).map(|j| y.data()[idx(lane, j)]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_preserves_length(m in 1usize..7, len in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let seq = tape.constant(random(&[m, 2], &mut rng));
        let f = tape.constant(random(&[len, 2, 3], &mut rng));
        let b = tape.constant(random(&[3], &mut rng));
        let out = tape.conv1d_same(seq, f, b).unwrap();
        prop_assert_eq!(tape.shape(out), vec![m, 3]);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let a = tape.constant(random(&[3, 3], &mut rng));
            let b = tape.constant(random(&[3, 3], &mut rng));
            let c = tape.softmax(tape.matmul(a, b).unwrap(), 0).unwrap();
            tape.value(tape.tanh(c).unwrap())
        };
        prop_assert_eq!(run().data().to_vec(), run().data().to_vec());
    }
}

#[test]
fn random_points_gradient_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m: usize = rng.gen_range(1..5);
        let x = random(&[m, 3], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let err = check_grads(&[x, w], |t, v| {
            let z = t.tanh(t.matmul(v[0], v[1]).unwrap()).unwrap();
            let s = t.softmax(z, 0).unwrap();
            weighted(t, t.mean(s, 1).unwrap())
        });
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn kink_margin_tracks_the_closest_switch() {
    let tape = Tape::new();
    assert_eq!(tape.kink_margin(), f64::INFINITY);
    let a = tape.leaf(Tensor::vector(vec![0.5, -2.0]), true);
    let b = tape.leaf(Tensor::vector(vec![0.2, -1.9]), true);
    tape.elem_max(&[a, b]).unwrap();
    assert!((tape.kink_margin() - 0.1).abs() < 1e-12);
    let m = tape.leaf(
        Tensor::matrix(3, 2, vec![1.0, 0.0, 0.99, 5.0, -1.0, 4.0]).unwrap(),
        true,
    );
    tape.maxpool(m, 0).unwrap();
    assert!((tape.kink_margin() - 0.01).abs() < 1e-12);
    tape.relu(tape.leaf(Tensor::vector(vec![-0.003, 4.0]), true)).unwrap();
    assert!((tape.kink_margin() - 0.003).abs() < 1e-12);
}
