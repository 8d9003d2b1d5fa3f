use ibnl_core::loss::{
    class_weights_from_counts, cross_entropy, cross_entropy_value, smoothed_targets, LossKind,
    LossSpec, Targets,
};
use ibnl_core::metrics::{
    brier_score, confusion_counts, expected_calibration_error, f1_from_pr, precision_recall_f1,
    read_confidence_dump, write_confidence_dump, MetricsReport, ECE_BINS,
};
use ibnl_core::tensor::gradcheck::check_gradients;
use ibnl_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{
    brier_oracle, confusion_oracle, ece_oracle, first_argmax, random_tensor, synthetic_predictions,
    to_tensor,
};

/// Cross-entropy written out per element.
fn loss_oracle(
    probs: &Tensor,
    classes: &[usize],
    kind: LossKind,
    weights: Option<&[f64]>,
    alpha: f64,
) -> f64 {
    let (m, c) = (probs.shape()[0], probs.shape()[1]);
    let mut total = 0.0;
    for i in 0..m {
        let w = weights.map_or(1.0, |w| w[classes[i]]);
        for j in 0..c {
            let t = if j == classes[i] {
                1.0 - alpha
            } else {
                alpha / (c - 1) as f64
            };
            let p = probs.data()[i * c + j].clamp(1e-12, 1.0 - 1e-12);
            total -= w * match kind {
                LossKind::Cce => t * p.ln(),
                LossKind::Bce => t * p.ln() + (1.0 - t) * (1.0 - p).ln(),
            };
        }
    }
    total / m as f64
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.shape()[1];
    let mut out = Vec::new();
    for i in 0..x.shape()[0] {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Tensor::from_vec(&[x.shape()[0], c], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_elementwise_oracle(
        m in 1usize..8, c in 2usize..5, bce in any::<bool>(), weighted in any::<bool>(),
        alpha in prop_oneof![Just(0.0), 0.01f64..0.3], seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = softmax_rows(&random_tensor(&[m, c], -3.0, 3.0, &mut rng));
        let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
        let kind = if bce { LossKind::Bce } else { LossKind::Cce };
        let spec = LossSpec {
            kind,
            class_weights: weighted.then(|| weights.clone()),
            label_smoothing: alpha,
        };
        let got = cross_entropy_value(&probs, Targets::Classes(&classes), &spec).unwrap();
        let expect = loss_oracle(&probs, &classes, kind, weighted.then_some(weights.as_slice()), alpha);
        prop_assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{} vs {}", got, expect);
        // class ids and the equivalent smoothed distribution agree
        let dist = smoothed_targets(&classes, c, 0.0).unwrap();
        let via_dist = cross_entropy_value(&probs, Targets::Distribution(&dist), &spec).unwrap();
        prop_assert!((via_dist - got).abs() <= 1e-12 * (1.0 + got.abs()));
    }

    #[test]
    fn loss_gradients_through_softmax(
        m in 1usize..5, c in 2usize..5, bce in any::<bool>(), alpha in prop_oneof![Just(0.0), 0.05f64..0.2], seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&[m, c], -2.0, 2.0, &mut rng);
        let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let spec = LossSpec {
            kind: if bce { LossKind::Bce } else { LossKind::Cce },
            class_weights: Some((0..c).map(|_| rng.random_range(0.5..2.0)).collect()),
            label_smoothing: alpha,
        };
        let r = check_gradients(&[logits], |_, v| {
            cross_entropy(v[0].softmax()?, Targets::Classes(&classes), &spec)
                .map_err(|e| ibnl_core::tensor::TensorError::Invalid(e.to_string()))
        })
        .unwrap();
        prop_assert!(r.passes(1e-4), "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn sigmoid_head_gradient(m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&[m, 1], -3.0, 3.0, &mut rng);
        let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
        let spec = LossSpec { kind: LossKind::Bce, ..LossSpec::default() };
        let r = check_gradients(std::slice::from_ref(&logits), |_, v| {
            cross_entropy(v[0].sigmoid()?, Targets::Classes(&classes), &spec)
                .map_err(|e| ibnl_core::tensor::TensorError::Invalid(e.to_string()))
        })
        .unwrap();
        prop_assert!(r.passes(1e-4), "max rel error {}", r.max_rel_error);
        // the single column is read as [1 - p, p]
        let p: Vec<f64> = logits.data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let two = Tensor::from_vec(&[m, 2], p.iter().flat_map(|&q| [1.0 - q, q]).collect()).unwrap();
        let one = Tensor::from_vec(&[m, 1], p).unwrap();
        let a = cross_entropy_value(&one, Targets::Classes(&classes), &spec).unwrap();
        let b = loss_oracle(&two, &classes, LossKind::Cce, None, 0.0);
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + b));
    }

    #[test]
    fn smoothed_rows_sum_to_one(m in 1usize..6, c in 2usize..6, alpha in 0.0f64..0.9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let t = smoothed_targets(&classes, c, alpha).unwrap();
        for i in 0..m {
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((t.row(i)[classes[i]] - (1.0 - alpha)).abs() < 1e-15);
        }
    }

    #[test]
    fn class_weights_balance_total_mass(counts in prop::collection::vec(1usize..500, 2..6)) {
        let w = class_weights_from_counts(&counts).unwrap();
        let n: usize = counts.iter().sum();
        // every class contributes the same weighted mass N / C
        for (wc, &nc) in w.iter().zip(&counts) {
            prop_assert!((wc * nc as f64 - n as f64 / counts.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn ece_and_brier_match_oracles(n in 1usize..200, c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (probs, truths) = synthetic_predictions(&mut rng, n, c);
        let t = to_tensor(&probs);
        let ece = expected_calibration_error(&t, &truths, ECE_BINS).unwrap();
        let brier = brier_score(&t, &truths).unwrap();
        prop_assert!((ece - ece_oracle(&probs, &truths, ECE_BINS)).abs() <= 1e-12);
        prop_assert!((brier - brier_oracle(&probs, &truths)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ece));
        prop_assert!((0.0..=2.0).contains(&brier));
    }

    #[test]
    fn confusion_counts_match_quadratic_loop(n in 1usize..100, c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let counts = confusion_counts(&pred, &truth, c).unwrap();
        for (k, o) in confusion_oracle(&pred, &truth, c).iter().enumerate() {
            prop_assert_eq!(
                [counts.true_pos[k], counts.false_pos[k], counts.false_neg[k], counts.true_neg[k]],
                *o
            );
            prop_assert_eq!(o.iter().sum::<usize>(), n);
            let s = precision_recall_f1(&counts, k);
            prop_assert!((0.0..=1.0).contains(&s.f1));
            prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
        }
    }

    #[test]
    fn report_and_dump_round_trip(n in 1usize..60, c in 2usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (probs, truths) = synthetic_predictions(&mut rng, n, c);
        let ids: Vec<usize> = (0..n).map(|i| 1000 + 3 * i).collect();
        let report = MetricsReport::compute(&to_tensor(&probs), &truths, &ids).unwrap();
        for (r, p) in report.confidence.iter().zip(&probs) {
            prop_assert_eq!(r.predicted_class, first_argmax(p));
        }
        let mut buf = Vec::new();
        write_confidence_dump(&report.confidence, &mut buf).unwrap();
        let back = read_confidence_dump(buf.as_slice()).unwrap();
        prop_assert_eq!(back, report.confidence);
    }
}

#[test]
fn f1_reproduces_published_triple() {
    let s = f1_from_pr(0.9856, 0.9133);
    assert!((s.f1 - 0.9481).abs() <= 1e-4, "{}", s.f1);
}

#[test]
fn weights_for_a_hundred_to_one_split() {
    let w = class_weights_from_counts(&[1000, 10]).unwrap();
    assert!((w[0] - 0.505).abs() < 1e-12);
    assert!((w[1] - 50.5).abs() < 1e-12);
}

#[test]
fn perfect_and_uniform_predictions() {
    let perfect = to_tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(
        expected_calibration_error(&perfect, &[0, 1], 10).unwrap(),
        0.0
    );
    assert_eq!(brier_score(&perfect, &[0, 1]).unwrap(), 0.0);
    let uniform = to_tensor(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    // ties go to class 0: one hit, one miss at confidence 0.5
    assert!((expected_calibration_error(&uniform, &[0, 1], 10).unwrap() - 0.0).abs() < 1e-15);
    assert!((brier_score(&uniform, &[0, 1]).unwrap() - 0.5).abs() < 1e-15);
}
