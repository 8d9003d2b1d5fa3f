use ibnl_core::tensor::gradcheck::check_gradients;
use ibnl_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

/// Direct nested-loop cross-correlation with zero padding.
fn naive_conv(
    x: &Tensor,
    k: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ch) * h + r as usize) * w + s as usize];
                                let kv = k.data()[((o * c + ch) * kh + u) * kw + v];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oc + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, oc, oh, ow], out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        prop_assert_eq!(c.shape(), &[m, n]);
        prop_assert!(close(c.data(), &naive_matmul(&a, &b), 1e-12));
    }

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..3, h in 3usize..7, w in 3usize..7,
        oc in 1usize..4, ksize in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(ksize <= h + 2 * pad && ksize <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let k = random(&[oc, c, ksize, ksize], &mut rng);
        let b = random(&[oc], &mut rng);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), Some(tape.constant(b.clone())), stride, pad)
            .unwrap()
            .value();
        let (shape, expect) = naive_conv(&x, &k, b.data(), stride, pad);
        prop_assert_eq!(y.shape(), shape.as_slice());
        prop_assert!(close(y.data(), &expect, 1e-12));
    }

    #[test]
    fn reductions_match_loops(m in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, d], &mut rng);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let col_sum = v.sum(0).unwrap().value();
        let row_mean = v.mean(1).unwrap().value();
        let total = v.sum_all().unwrap().value().item().unwrap();
        for j in 0..d {
            let s: f64 = (0..m).map(|i| x.data()[i * d + j]).sum();
            prop_assert!((col_sum.data()[j] - s).abs() < 1e-12);
        }
        for i in 0..m {
            let s: f64 = x.row(i).iter().sum::<f64>() / d as f64;
            prop_assert!((row_mean.data()[i] - s).abs() < 1e-12);
        }
        prop_assert!((total - x.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(m in 1usize..6, d in 2usize..6, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, d], &mut rng);
        let scaled = Tensor::from_vec(&[m, d], x.data().iter().map(|v| v * scale).collect()).unwrap();
        let tape = Tape::new();
        let p = tape.constant(scaled.clone()).softmax().unwrap().value();
        for i in 0..m {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // shift invariance against the unshifted formula
            let z: f64 = scaled.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..d {
                prop_assert!((row[j] - scaled.row(i)[j].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_gradients(m in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, d], &mut rng);
        let b = random(&[m, d], &mut rng);
        let r = check_gradients(&[a, b], |_, v| {
            let s = v[0].mul(v[1])?.sub(v[1])?.sigmoid()?;
            let t = v[0].exp()?.add(s)?.selu()?;
            t.mul(v[1])?.sum_all()
        })
        .unwrap();
        prop_assert!(r.passes(GRAD_TOL), "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn dense_and_softmax_gradients(m in 1usize..5, k in 1usize..5, n in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, k], &mut rng);
        let w = random(&[k, n], &mut rng);
        let b = random(&[n], &mut rng);
        let weights = random(&[m, n], &mut rng);
        let r = check_gradients(&[x, w, b], |tape, v| {
            let y = v[0].matmul(v[1])?.add_bias(v[2])?.softmax()?;
            y.mul(tape.constant(weights.clone()))?.sum_all()
        })
        .unwrap();
        prop_assert!(r.passes(GRAD_TOL), "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn log_gradient_away_from_zero(m in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[m, 3], (0..m * 3).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap();
        let r = check_gradients(&[x], |_, v| v[0].log()?.mean(0)?.sum_all()).unwrap();
        prop_assert!(r.passes(GRAD_TOL), "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn conv_pool_gradients(c in 1usize..3, oc in 1usize..3, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, c, 6, 6], &mut rng);
        let k = random(&[oc, c, 3, 3], &mut rng);
        let b = random(&[oc], &mut rng);
        let probe_len = {
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), Some(tape.constant(b.clone())), stride, pad).unwrap();
            let y = y.relu().unwrap().max_pool2d(2).unwrap().global_avg_pool().unwrap();
            y.shape()
        };
        let probe = random(&probe_len, &mut rng);
        let r = check_gradients(&[x, k, b], |tape, v| {
            let y = v[0].conv2d(v[1], Some(v[2]), stride, pad)?.relu()?.max_pool2d(2)?.global_avg_pool()?;
            y.mul(tape.constant(probe.clone()))?.sum_all()
        })
        .unwrap();
        prop_assert!(r.passes(GRAD_TOL), "max rel error {}", r.max_rel_error);
    }
}

#[test]
fn max_pool_picks_window_maxima() {
    let x = Tensor::from_vec(
        &[1, 1, 4, 4],
        (0..16).map(|v| ((v * 7) % 16) as f64).collect(),
    )
    .unwrap();
    let tape = Tape::new();
    let y = tape.constant(x.clone()).max_pool2d(2).unwrap().value();
    let mut expect = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let mut best = f64::MIN;
            for u in 0..2 {
                for v in 0..2 {
                    best = best.max(x.data()[(2 * i + u) * 4 + 2 * j + v]);
                }
            }
            expect.push(best);
        }
    }
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), expect.as_slice());
}

#[test]
fn gradient_of_shared_input_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1], &[3.0]).unwrap());
    let y = x.mul(x).unwrap().add(x).unwrap().sum_all().unwrap();
    let g = tape.backward(y).unwrap().wrt(x);
    assert_eq!(g.data(), &[7.0]);
}
