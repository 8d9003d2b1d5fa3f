use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// How to carve a skewed train split plus balanced-by-design val/test splits
/// out of a labelled source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub majority_classes: Vec<usize>,
    pub minority_classes: Vec<usize>,
    pub majority_train_count: usize,
    /// Minority-to-majority training count ratio.
    pub ratio: f64,
    /// Validation samples per class as a fraction of that class's training count.
    pub val_fraction: f64,
    pub test_per_class: usize,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self {
            majority_classes: vec![8],
            minority_classes: vec![3],
            majority_train_count: 1000,
            ratio: 0.01,
            val_fraction: 0.15,
            test_per_class: 500,
        }
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// `max(1, round_half_up(ratio * majority))`.
pub fn minority_train_count(ratio: f64, majority: usize) -> usize {
    round_half_up(ratio * majority as f64).max(1)
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.majority_classes.is_empty() || self.minority_classes.is_empty() {
            return bad("need at least one majority and one minority class".into());
        }
        let mut all: Vec<usize> = self.class_order().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return bad("class lists overlap or repeat a label".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio {} outside (0, 1]", self.ratio));
        }
        if self.majority_train_count == 0 || self.ratio * (self.majority_train_count as f64) < 1.0 {
            return bad(format!(
                "ratio {} with {} majority samples leaves no minority sample",
                self.ratio, self.majority_train_count
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.test_per_class == 0 {
            return bad("test_per_class must be positive".into());
        }
        Ok(())
    }

    /// Source labels in experiment-class order: majorities, then minorities.
    pub fn class_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.majority_classes
            .iter()
            .chain(&self.minority_classes)
            .copied()
    }

    pub fn num_classes(&self) -> usize {
        self.majority_classes.len() + self.minority_classes.len()
    }

    /// Experiment class ids of the minority classes.
    pub fn minority_ids(&self) -> std::ops::Range<usize> {
        self.majority_classes.len()..self.num_classes()
    }

    /// Training samples per experiment class.
    pub fn train_counts(&self) -> Vec<usize> {
        let minority = minority_train_count(self.ratio, self.majority_train_count);
        self.majority_classes
            .iter()
            .map(|_| self.majority_train_count)
            .chain(self.minority_classes.iter().map(|_| minority))
            .collect()
    }

    /// Validation samples per experiment class.
    pub fn val_counts(&self) -> Vec<usize> {
        self.train_counts()
            .into_iter()
            .map(|n| round_half_up(self.val_fraction * n as f64))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Source label to experiment class id.
    pub class_map: BTreeMap<usize, usize>,
}

/// Draws disjoint train/val/test splits from `source`.
///
/// Each class's source indices are shuffled with a generator seeded by
/// `seed`; the first block goes to train, the next to val and the next to
/// test. Splits are stored grouped by class.
pub fn build_imbalanced_split(
    source: &Dataset,
    spec: &ImbalanceSpec,
    seed: u64,
) -> Result<SplitBundle, DataError> {
    spec.validate()?;
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in source.labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let train_counts = spec.train_counts();
    let val_counts = spec.val_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    let mut labels = [Vec::new(), Vec::new(), Vec::new()];
    let mut class_map = BTreeMap::new();
    for (class, label) in spec.class_order().enumerate() {
        let counts = [train_counts[class], val_counts[class], spec.test_per_class];
        let needed: usize = counts.iter().sum();
        let mut pool = by_label.get(&label).cloned().unwrap_or_default();
        if pool.len() < needed {
            return Err(DataError::Insufficient {
                label,
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        let mut start = 0;
        for (split, &count) in counts.iter().enumerate() {
            rows[split].extend_from_slice(&pool[start..start + count]);
            labels[split].extend(std::iter::repeat_n(class, count));
            start += count;
        }
        class_map.insert(label, class);
    }
    let names: Vec<String> = spec.class_order().map(|l| l.to_string()).collect();
    let make = |split: usize| Dataset {
        images: source.images.select_rows(&rows[split]),
        labels: labels[split].clone(),
        class_names: names.clone(),
        sample_ids: rows[split].iter().map(|&r| source.sample_ids[r]).collect(),
    };
    Ok(SplitBundle {
        train: make(0),
        val: make(1),
        test: make(2),
        class_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_source(per_class: usize, classes: usize) -> Dataset {
        let n = per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        Dataset {
            images: Tensor::from_vec(&[n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap(),
            labels,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            sample_ids: (0..n).collect(),
        }
    }

    #[test]
    fn counts_follow_spec() {
        let spec = ImbalanceSpec {
            majority_train_count: 100,
            ratio: 0.05,
            test_per_class: 20,
            ..ImbalanceSpec::default()
        };
        assert_eq!(spec.train_counts(), vec![100, 5]);
        assert_eq!(spec.val_counts(), vec![15, 1]);
        let b = build_imbalanced_split(&toy_source(200, 10), &spec, 1).unwrap();
        assert_eq!(b.train.class_counts(), vec![100, 5]);
        assert_eq!(b.val.class_counts(), vec![15, 1]);
        assert_eq!(b.test.class_counts(), vec![20, 20]);
        assert_eq!(b.class_map[&8], 0);
        assert_eq!(b.class_map[&3], 1);
        assert!(b
            .train
            .sample_ids
            .iter()
            .all(|&i| i % 10 == 8 || i % 10 == 3));
    }

    #[test]
    fn rounding() {
        assert_eq!(minority_train_count(0.01, 1000), 10);
        assert_eq!(minority_train_count(0.0025, 1000), 3);
        assert_eq!(minority_train_count(1.0, 1000), 1000);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
    }

    #[test]
    fn rejects_bad_specs() {
        let src = toy_source(50, 10);
        let cases = [
            ImbalanceSpec {
                minority_classes: vec![8],
                ..ImbalanceSpec::default()
            },
            ImbalanceSpec {
                ratio: 0.0,
                ..ImbalanceSpec::default()
            },
            ImbalanceSpec {
                ratio: 0.0005,
                ..ImbalanceSpec::default()
            },
            ImbalanceSpec {
                val_fraction: 1.0,
                ..ImbalanceSpec::default()
            },
        ];
        for spec in cases {
            assert!(matches!(
                build_imbalanced_split(&src, &spec, 0),
                Err(DataError::InvalidSpec(_))
            ));
        }
        assert!(matches!(
            build_imbalanced_split(&src, &ImbalanceSpec::default(), 0),
            Err(DataError::Insufficient { label: 8, .. })
        ));
    }
}
