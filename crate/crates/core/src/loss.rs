//! Output activations and cross-entropy losses over predicted probabilities.
//!
//! Losses consume probabilities (after softmax or sigmoid), not logits. A
//! sigmoid head has a single output column holding `P(class 1)`; for the
//! loss it is read as the two-class distribution `[1 - p, p]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("softmax needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label smoothing {0} outside [0, 1)")]
    Smoothing(f64),
    #[error("expected {expected} class weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("class weight {0} is not a positive finite number")]
    BadWeight(f64),
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("target {target} at row {row} is not a class id below {num_classes}")]
    BadTarget {
        row: usize,
        target: usize,
        num_classes: usize,
    },
    #[error("{targets} targets for {rows} prediction rows")]
    RowMismatch { rows: usize, targets: usize },
    #[error("target distribution shape {got:?} does not match predictions {expected:?}")]
    TargetShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Categorical cross-entropy on the true class only.
    Cce,
    /// Per-column binary cross-entropy.
    Bce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cce => "cce",
            LossKind::Bce => "bce",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub label_smoothing: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Cce,
            class_weights: None,
            label_smoothing: 0.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self, num_classes: usize) -> Result<(), LossError> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(LossError::Smoothing(self.label_smoothing));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes {
                return Err(LossError::WeightCount {
                    expected: num_classes,
                    got: w.len(),
                });
            }
            if let Some(&bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(LossError::BadWeight(bad));
            }
        }
        Ok(())
    }

    fn weight(&self, class: usize) -> f64 {
        self.class_weights.as_ref().map_or(1.0, |w| w[class])
    }
}

/// Ground truth for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// One class id per row.
    Classes(&'a [usize]),
    /// One distribution per row over all classes (`[m×C]`, one-hot or soft).
    /// Class weights use each row's argmax.
    Distribution(&'a Tensor),
}

/// Row-wise softmax recorded on the tape.
pub fn softmax<'t>(logits: Var<'t>) -> Result<Var<'t>, LossError> {
    let shape = logits.shape();
    if shape.len() == 2 && shape[1] < 2 {
        return Err(LossError::TooFewClasses(shape[1]));
    }
    Ok(logits.softmax()?)
}

/// Element-wise logistic function recorded on the tape.
pub fn sigmoid<'t>(logits: Var<'t>) -> Result<Var<'t>, LossError> {
    Ok(logits.sigmoid()?)
}

/// `w_c = N / (C · N_c)`.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>, LossError> {
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(LossError::EmptyClass { class });
    }
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (c * n as f64))
        .collect())
}

/// Soft targets: `1 - alpha` on the true class, `alpha / (C - 1)` elsewhere.
pub fn smoothed_targets(
    classes: &[usize],
    num_classes: usize,
    alpha: f64,
) -> Result<Tensor, LossError> {
    let mut data = vec![0.0; classes.len() * num_classes];
    for (row, &y) in classes.iter().enumerate() {
        if y >= num_classes {
            return Err(LossError::BadTarget {
                row,
                target: y,
                num_classes,
            });
        }
        fill_row(
            &mut data[row * num_classes..(row + 1) * num_classes],
            y,
            alpha,
        );
    }
    Ok(Tensor::from_vec(&[classes.len(), num_classes], data)?)
}

fn fill_row(row: &mut [f64], truth: usize, alpha: f64) {
    let c = row.len();
    let off = if c > 1 { alpha / (c - 1) as f64 } else { 0.0 };
    for (j, slot) in row.iter_mut().enumerate() {
        *slot = if j == truth { 1.0 - alpha } else { off };
    }
}

/// Mean cross-entropy of `probs` against `targets`, recorded on the tape
/// with its exact gradient with respect to the probabilities.
pub fn cross_entropy<'t>(
    probs: Var<'t>,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<Var<'t>, LossError> {
    let (value, grad) = probs.with_value(|p| loss_and_grad(p, targets, spec))?;
    let name = match spec.kind {
        LossKind::Cce => "cce",
        LossKind::Bce => "bce",
    };
    Ok(probs.scalar_fn(name, value, grad)?)
}

/// Loss value without recording anything.
pub fn cross_entropy_value(
    probs: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<f64, LossError> {
    loss_and_grad(probs, targets, spec).map(|(v, _)| v)
}

fn clamp(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

fn loss_and_grad(
    probs: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>), LossError> {
    if probs.rank() != 2 {
        return Err(TensorError::Invalid(format!(
            "loss expects [m×C] probabilities, got {:?}",
            probs.shape()
        ))
        .into());
    }
    let (m, width) = (probs.shape()[0], probs.shape()[1]);
    let binary_head = width == 1;
    let num_classes = if binary_head { 2 } else { width };
    spec.validate(num_classes)?;

    // per-row soft targets over `num_classes` and the class used for weighting
    let mut soft = vec![0.0; m * num_classes];
    let mut truth = vec![0usize; m];
    match targets {
        Targets::Classes(classes) => {
            if classes.len() != m {
                return Err(LossError::RowMismatch {
                    rows: m,
                    targets: classes.len(),
                });
            }
            for (row, &y) in classes.iter().enumerate() {
                if y >= num_classes {
                    return Err(LossError::BadTarget {
                        row,
                        target: y,
                        num_classes,
                    });
                }
                truth[row] = y;
                fill_row(
                    &mut soft[row * num_classes..(row + 1) * num_classes],
                    y,
                    spec.label_smoothing,
                );
            }
        }
        Targets::Distribution(t) => {
            if t.shape() != [m, num_classes] {
                return Err(LossError::TargetShape {
                    expected: vec![m, num_classes],
                    got: t.shape().to_vec(),
                });
            }
            let alpha = spec.label_smoothing;
            let off = alpha / (num_classes - 1) as f64;
            for row in 0..m {
                let src = t.row(row);
                truth[row] = t.select_rows(&[row]).argmax_rows()[0];
                for (j, &v) in src.iter().enumerate() {
                    soft[row * num_classes + j] = if alpha == 0.0 {
                        v
                    } else {
                        (1.0 - alpha) * v + off * (1.0 - v)
                    };
                }
            }
        }
    }

    let inv_m = 1.0 / m.max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; m * width];
    for row in 0..m {
        let w = spec.weight(truth[row]) * inv_m;
        let t = &soft[row * num_classes..(row + 1) * num_classes];
        let p_row = probs.row(row);
        let g_row = &mut grad[row * width..(row + 1) * width];
        if binary_head {
            // columns read as [1 - p, p]; both kinds reduce to the same BCE
            let (p, live) = clamp(p_row[0]);
            let (t0, t1) = (t[0], t[1]);
            total -= w * (t1 * p.ln() + t0 * (1.0 - p).ln());
            if live {
                g_row[0] = -w * (t1 / p - t0 / (1.0 - p));
            }
            continue;
        }
        for j in 0..width {
            let (p, live) = clamp(p_row[j]);
            let tj = t[j];
            match spec.kind {
                LossKind::Cce => {
                    if tj != 0.0 {
                        total -= w * tj * p.ln();
                        if live {
                            g_row[j] = -w * tj / p;
                        }
                    }
                }
                LossKind::Bce => {
                    total -= w * (tj * p.ln() + (1.0 - tj) * (1.0 - p).ln());
                    if live {
                        g_row[j] = -w * (tj / p - (1.0 - tj) / (1.0 - p));
                    }
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(TensorError::NonFinite {
            op: "cross_entropy",
        }
        .into());
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn probs(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], &[0.0, 3f64.ln(), 5.0, 5.0]).unwrap());
        let p = softmax(x).unwrap().value();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
        assert_eq!(&p.data()[2..], &[0.5, 0.5]);
        let narrow = tape.constant(Tensor::zeros(&[3, 1]));
        assert_eq!(softmax(narrow).unwrap_err(), LossError::TooFewClasses(1));
    }

    #[test]
    fn cce_examples() {
        let spec = LossSpec::default();
        let half = probs(&[&[0.5, 0.5]]);
        let l = cross_entropy_value(&half, Targets::Classes(&[1]), &spec).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = probs(&[&[0.0, 1.0]]);
        let l = cross_entropy_value(&perfect, Targets::Classes(&[1]), &spec).unwrap();
        assert!(l.abs() < 1e-11);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(
            class_weights_from_counts(&[500, 500]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            class_weights_from_counts(&[1, 1, 1]).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        let w = class_weights_from_counts(&[1000, 10]).unwrap();
        assert!((w[0] - 0.505).abs() < 1e-12 && (w[1] - 50.5).abs() < 1e-12);
        assert_eq!(
            class_weights_from_counts(&[3, 0]).unwrap_err(),
            LossError::EmptyClass { class: 1 }
        );
    }

    #[test]
    fn smoothing_targets() {
        let t = smoothed_targets(&[0], 2, 0.1).unwrap();
        assert_eq!(t.data(), &[0.9, 0.1]);
        let t = smoothed_targets(&[2], 3, 0.2).unwrap();
        assert!((t.data()[0] - 0.1).abs() < 1e-15 && (t.data()[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_head_matches_two_column_bce_form() {
        let p1 = probs(&[&[0.8], &[0.3]]);
        let spec = LossSpec::default();
        let l = cross_entropy_value(&p1, Targets::Classes(&[1, 0]), &spec).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        let bce = LossSpec {
            kind: LossKind::Bce,
            ..LossSpec::default()
        };
        assert_eq!(
            cross_entropy_value(&p1, Targets::Classes(&[1, 0]), &bce).unwrap(),
            l
        );
    }

    #[test]
    fn gradient_zero_where_clamped() {
        let tape = Tape::new();
        let p = tape.leaf(probs(&[&[0.0, 1.0]]));
        let loss = cross_entropy(p, Targets::Classes(&[0]), &LossSpec::default()).unwrap();
        let l = loss.value().item().unwrap();
        assert!((l + PROB_CLAMP.ln()).abs() < 1e-9);
        let g = tape.backward(loss).unwrap().wrt(p);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn validation_errors() {
        let p = probs(&[&[0.5, 0.5]]);
        let bad =
            |spec: LossSpec| cross_entropy_value(&p, Targets::Classes(&[0]), &spec).unwrap_err();
        assert_eq!(
            bad(LossSpec {
                label_smoothing: 1.0,
                ..LossSpec::default()
            }),
            LossError::Smoothing(1.0)
        );
        assert!(matches!(
            bad(LossSpec {
                class_weights: Some(vec![1.0]),
                ..LossSpec::default()
            }),
            LossError::WeightCount { .. }
        ));
        assert!(matches!(
            cross_entropy_value(&p, Targets::Classes(&[2]), &LossSpec::default()),
            Err(LossError::BadTarget { .. })
        ));
        assert!(matches!(
            cross_entropy_value(&p, Targets::Classes(&[0, 1]), &LossSpec::default()),
            Err(LossError::RowMismatch { .. })
        ));
    }
}
