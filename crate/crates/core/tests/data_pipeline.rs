use std::collections::HashSet;
use std::sync::OnceLock;

use ibnl_core::data::idx::{decode_idx, encode_idx, IdxArray};
use ibnl_core::data::{batches, build_imbalanced_split, load_idx, Dataset, ImbalanceSpec};
use ibnl_core::nn::Mode;
use ibnl_core::tensor::Tensor;
use proptest::prelude::*;

mod common;
use common::synthetic_digits;

fn spec_strategy() -> impl Strategy<Value = ImbalanceSpec> {
    (
        prop::sample::subsequence((0..10usize).collect::<Vec<_>>(), 2..5),
        1usize..3,
        20usize..120,
        0.01f64..1.0,
        0.0f64..0.5,
        1usize..30,
        any::<bool>(),
    )
        .prop_filter_map(
            "needs a minority sample",
            |(labels, n_major, major, ratio, val, test, shuffle)| {
                let mut labels = labels;
                if shuffle {
                    labels.reverse();
                }
                let n_major = n_major.min(labels.len() - 1);
                let spec = ImbalanceSpec {
                    majority_classes: labels[..n_major].to_vec(),
                    minority_classes: labels[n_major..].to_vec(),
                    majority_train_count: major,
                    ratio,
                    val_fraction: val,
                    test_per_class: test,
                };
                spec.validate().is_ok().then_some(spec)
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_are_disjoint_exact_and_deterministic(spec in spec_strategy(), seed in any::<u64>()) {
        let source = labelled_source();
        let a = build_imbalanced_split(source, &spec, seed).unwrap();
        let b = build_imbalanced_split(source, &spec, seed).unwrap();
        prop_assert_eq!(&a, &b);

        prop_assert_eq!(a.train.class_counts(), spec.train_counts());
        prop_assert_eq!(a.val.class_counts(), spec.val_counts());
        prop_assert_eq!(a.test.class_counts(), vec![spec.test_per_class; spec.num_classes()]);

        let mut seen = HashSet::new();
        for split in [&a.train, &a.val, &a.test] {
            for &id in &split.sample_ids {
                prop_assert!(seen.insert(id), "sample {} in two splits", id);
            }
            // every sample keeps its source label under the class map
            for (&id, &class) in split.sample_ids.iter().zip(&split.labels) {
                prop_assert_eq!(a.class_map[&source.labels[id]], class);
            }
        }
        let minority = spec.minority_ids();
        let counts = spec.train_counts();
        for c in minority {
            let expect = ((spec.ratio * spec.majority_train_count as f64) + 0.5).floor().max(1.0) as usize;
            prop_assert_eq!(counts[c], expect);
        }
    }

    #[test]
    fn idx_round_trip_is_byte_exact(dims in prop::collection::vec(1usize..6, 1..4), seed in any::<u8>()) {
        let n: usize = dims.iter().product();
        let arr = IdxArray { dims: dims.clone(), data: (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect() };
        let bytes = encode_idx(&arr);
        let back = decode_idx(&bytes).unwrap();
        prop_assert_eq!(&back, &arr);
        prop_assert_eq!(encode_idx(&back), bytes);
    }

    #[test]
    fn idx_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_idx(&bytes);
    }

    #[test]
    fn train_batches_partition_a_permutation(n in 2usize..80, batch in 2usize..17, seed in any::<u64>(), epoch in 0u64..4) {
        let data = tiny(n);
        let got: Vec<Vec<usize>> = batches(&data, batch, seed, epoch, Mode::Train).unwrap().map(|b| b.sample_ids).collect();
        prop_assert_eq!(got.len(), n / batch);
        prop_assert!(got.iter().all(|b| b.len() == batch));
        let flat: Vec<usize> = got.concat();
        let unique: HashSet<usize> = flat.iter().copied().collect();
        prop_assert_eq!(unique.len(), flat.len());
        let again: Vec<Vec<usize>> = batches(&data, batch, seed, epoch, Mode::Train).unwrap().map(|b| b.sample_ids).collect();
        prop_assert_eq!(got, again);
    }

    #[test]
    fn infer_batches_keep_order_and_tail(n in 1usize..80, batch in 1usize..17) {
        let data = tiny(n);
        let flat: Vec<usize> = batches(&data, batch, 0, 0, Mode::Infer).unwrap().flat_map(|b| b.sample_ids).collect();
        prop_assert_eq!(flat, data.sample_ids.clone());
    }
}

/// 300 one-pixel samples per digit, labels interleaved.
fn labelled_source() -> &'static Dataset {
    static SOURCE: OnceLock<Dataset> = OnceLock::new();
    SOURCE.get_or_init(|| {
        let n = 3000;
        Dataset {
            images: Tensor::from_vec(&[n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap(),
            labels: (0..n).map(|i| i % 10).collect(),
            class_names: (0..10).map(|d| d.to_string()).collect(),
            sample_ids: (0..n).collect(),
        }
    })
}

fn tiny(n: usize) -> Dataset {
    let mut d = synthetic_digits(1, &[0], 0);
    d = d.subset(&vec![0; n]);
    d.sample_ids = (0..n).map(|i| 10 * i + 1).collect();
    d
}

#[test]
fn shuffles_differ_between_epochs() {
    let data = tiny(64);
    let order = |epoch| -> Vec<usize> {
        batches(&data, 8, 7, epoch, Mode::Train)
            .unwrap()
            .flat_map(|b| b.sample_ids)
            .collect()
    };
    assert_ne!(order(0), order(1));
    assert_eq!(order(2), order(2));
}

#[test]
fn load_idx_pairs_images_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxArray {
        dims: vec![3, 2, 2],
        data: vec![0, 255, 128, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    };
    let labels = IdxArray {
        dims: vec![3],
        data: vec![7, 1, 7],
    };
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, encode_idx(&images)).unwrap();
    std::fs::write(&lp, encode_idx(&labels)).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.images.shape(), &[3, 1, 2, 2]);
    assert_eq!(d.labels, vec![7, 1, 7]);
    assert_eq!(d.sample_ids, vec![0, 1, 2]);
    assert_eq!(d.images.data()[1], 1.0);
    assert!((d.images.data()[2] - 128.0 / 255.0).abs() < 1e-15);

    let short = IdxArray {
        dims: vec![2],
        data: vec![7, 1],
    };
    std::fs::write(&lp, encode_idx(&short)).unwrap();
    assert!(load_idx(&ip, &lp).is_err());
    std::fs::write(&lp, encode_idx(&images)).unwrap();
    assert!(load_idx(&ip, &lp).is_err());
}
