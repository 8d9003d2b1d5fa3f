//! Per-class classification scores, calibration error, Brier score and
//! per-sample confidence summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Default number of equal-width confidence bins for calibration error.
pub const ECE_BINS: usize = 10;

/// Allowed deviation of a probability row's sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {truths} labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("class id {class} at position {index} is not below {num_classes}")]
    ClassOutOfRange {
        index: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("no samples to score")]
    Empty,
    #[error("probability row {row} sums to {sum}")]
    NotDistribution { row: usize, sum: f64 },
    #[error("expected a [n×C] probability matrix, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("bin count must be positive")]
    NoBins,
    #[error("confidence dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One-vs-rest counts per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: Vec<usize>,
    pub false_pos: Vec<usize>,
    pub false_neg: Vec<usize>,
    pub true_neg: Vec<usize>,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.true_pos.len()
    }

    pub fn total(&self) -> usize {
        self.true_pos.first().map_or(0, |_| {
            self.true_pos[0] + self.false_pos[0] + self.false_neg[0] + self.true_neg[0]
        })
    }

    /// Fraction of samples whose prediction matches the label.
    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.true_pos.iter().sum::<usize>() as f64 / n as f64
    }
}

fn check_ids(ids: &[usize], num_classes: usize) -> Result<(), MetricsError> {
    match ids.iter().position(|&c| c >= num_classes) {
        Some(index) => Err(MetricsError::ClassOutOfRange {
            index,
            class: ids[index],
            num_classes,
        }),
        None => Ok(()),
    }
}

pub fn confusion_counts(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    check_ids(predictions, num_classes)?;
    check_ids(truths, num_classes)?;
    let n = truths.len();
    let mut tp = vec![0; num_classes];
    let mut fp = vec![0; num_classes];
    let mut fn_ = vec![0; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let tn = (0..num_classes)
        .map(|c| n - tp[c] - fp[c] - fn_[c])
        .collect();
    Ok(ConfusionCounts {
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        true_neg: tn,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and their harmonic mean; any `0/0` is reported as 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> ClassScores {
    ClassScores {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

pub fn precision_recall_f1(counts: &ConfusionCounts, class: usize) -> ClassScores {
    let tp = counts.true_pos[class] as f64;
    let precision = ratio(tp, tp + counts.false_pos[class] as f64);
    let recall = ratio(tp, tp + counts.false_neg[class] as f64);
    f1_from_pr(precision, recall)
}

/// Reads a sigmoid head's single column `p` as the distribution `[1 - p, p]`.
pub fn expand_binary(probs: &Tensor) -> Tensor {
    if probs.rank() != 2 || probs.shape()[1] != 1 {
        return probs.clone();
    }
    let data = probs.data().iter().flat_map(|&p| [1.0 - p, p]).collect();
    Tensor::from_vec(&[probs.shape()[0], 2], data).expect("two columns per row")
}

fn check_probs(probs: &Tensor, truths: &[usize]) -> Result<(usize, usize), MetricsError> {
    if probs.rank() != 2 {
        return Err(MetricsError::Shape(probs.shape().to_vec()));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if n != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: n,
            truths: truths.len(),
        });
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    check_ids(truths, c)?;
    for row in 0..n {
        let sum: f64 = probs.row(row).iter().sum();
        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
            return Err(MetricsError::NotDistribution { row, sum });
        }
    }
    Ok((n, c))
}

/// Bin `b` covers confidences in `(b / bins, (b + 1) / bins]`.
fn confidence_bin(conf: f64, bins: usize) -> usize {
    let nb = bins as f64;
    let mut b = ((conf * nb).ceil() as usize).clamp(1, bins) - 1;
    while b > 0 && conf <= b as f64 / nb {
        b -= 1;
    }
    while b + 1 < bins && conf > (b + 1) as f64 / nb {
        b += 1;
    }
    b
}

/// `sum_b (n_b / N) |accuracy_b - confidence_b|` over equal-width bins of
/// the top-class probability.
pub fn expected_calibration_error(
    probs: &Tensor,
    truths: &[usize],
    bins: usize,
) -> Result<f64, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let (n, _) = check_probs(probs, truths)?;
    let predicted = probs.argmax_rows();
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, (&p, &t)) in predicted.iter().zip(truths).enumerate() {
        let conf = probs.row(row)[p];
        let b = confidence_bin(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if p == t {
            correct[b] += 1;
        }
    }
    let total = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n as f64) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum();
    Ok(total)
}

/// Mean over samples of the squared distance to the one-hot label.
pub fn brier_score(probs: &Tensor, truths: &[usize]) -> Result<f64, MetricsError> {
    let (n, _) = check_probs(probs, truths)?;
    let total: f64 = truths
        .iter()
        .enumerate()
        .map(|(row, &t)| {
            probs
                .row(row)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let d = p - if c == t { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub sample_id: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probs: Vec<f64>,
}

impl ConfidenceRecord {
    pub fn p_true(&self) -> f64 {
        self.probs[self.true_class]
    }
}

pub fn confidence_records(
    probs: &Tensor,
    truths: &[usize],
    sample_ids: &[usize],
) -> Result<Vec<ConfidenceRecord>, MetricsError> {
    check_probs(probs, truths)?;
    if sample_ids.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: sample_ids.len(),
            truths: truths.len(),
        });
    }
    Ok(probs
        .argmax_rows()
        .into_iter()
        .enumerate()
        .map(|(row, predicted_class)| ConfidenceRecord {
            sample_id: sample_ids[row],
            true_class: truths[row],
            predicted_class,
            probs: probs.row(row).to_vec(),
        })
        .collect())
}

/// Probability bands used to bucket `P(true class)`: `[0, 0.5)`,
/// `[0.5, 0.75)` and `[0.75, 1]`.
pub const BAND_EDGES: [f64; 2] = [0.5, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class: usize,
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub bands: [usize; 3],
    /// Median of `P(true class)` over correctly classified samples.
    pub correct_median: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

pub fn band_of(p: f64) -> usize {
    BAND_EDGES.iter().filter(|&&edge| p >= edge).count()
}

/// Per true class: spread of the probability given to that class and how
/// many samples fall in each band. Classes with no samples are omitted.
pub fn confidence_profile(records: &[ConfidenceRecord]) -> Vec<ClassConfidence> {
    let classes = records.iter().map(|r| r.true_class + 1).max().unwrap_or(0);
    (0..classes)
        .filter_map(|class| {
            let mine: Vec<&ConfidenceRecord> =
                records.iter().filter(|r| r.true_class == class).collect();
            let mut all: Vec<f64> = mine.iter().map(|r| r.p_true()).collect();
            let mut correct: Vec<f64> = mine
                .iter()
                .filter(|r| r.predicted_class == class)
                .map(|r| r.p_true())
                .collect();
            let mut bands = [0; 3];
            for &p in &all {
                bands[band_of(p)] += 1;
            }
            let median_all = median(&mut all)?;
            Some(ClassConfidence {
                class,
                count: all.len(),
                min: all[0],
                median: median_all,
                max: all[all.len() - 1],
                bands,
                correct_median: median(&mut correct),
            })
        })
        .collect()
}

/// Scores of one evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub ece: f64,
    pub brier: f64,
    #[serde(skip)]
    pub confidence: Vec<ConfidenceRecord>,
}

impl MetricsReport {
    /// `probs` may be a single sigmoid column; it is expanded to two classes.
    pub fn compute(
        probs: &Tensor,
        truths: &[usize],
        sample_ids: &[usize],
    ) -> Result<Self, MetricsError> {
        let probs = expand_binary(probs);
        let confidence = confidence_records(&probs, truths, sample_ids)?;
        let predicted: Vec<usize> = confidence.iter().map(|r| r.predicted_class).collect();
        let c = probs.shape()[1];
        let counts = confusion_counts(&predicted, truths, c)?;
        Ok(Self {
            per_class: (0..c).map(|k| precision_recall_f1(&counts, k)).collect(),
            accuracy: counts.accuracy(),
            ece: expected_calibration_error(&probs, truths, ECE_BINS)?,
            brier: brier_score(&probs, truths)?,
            counts,
            confidence,
        })
    }
}

/// Writes `sample_id,true_class,predicted_class,prob_0..prob_{C-1}`.
pub fn write_confidence_dump<W: Write>(
    records: &[ConfidenceRecord],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let c = records.first().map_or(0, |r| r.probs.len());
    let mut header = vec![
        "sample_id".to_string(),
        "true_class".into(),
        "predicted_class".into(),
    ];
    header.extend((0..c).map(|k| format!("prob_{k}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.sample_id.to_string(),
            r.true_class.to_string(),
            r.predicted_class.to_string(),
        ];
        row.extend(r.probs.iter().map(|p| format!("{p:?}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Strict reader for [`write_confidence_dump`] output.
pub fn read_confidence_dump<R: Read>(input: R) -> Result<Vec<ConfidenceRecord>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => {
            return Err(MetricsError::Dump {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let c = header.len().saturating_sub(3);
    let expected: Vec<String> = ["sample_id", "true_class", "predicted_class"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..c).map(|k| format!("prob_{k}")))
        .collect();
    if c == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(MetricsError::Dump {
            line: 1,
            message: "header must be sample_id,true_class,predicted_class,prob_0..".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row?;
        let bad = |message: String| MetricsError::Dump { line, message };
        if row.len() != c + 3 {
            return Err(bad(format!("expected {} fields, got {}", c + 3, row.len())));
        }
        let int = |k: usize| {
            row[k]
                .parse::<usize>()
                .map_err(|_| bad(format!("bad integer `{}`", &row[k])))
        };
        let (sample_id, true_class, predicted_class) = (int(0)?, int(1)?, int(2)?);
        if true_class >= c || predicted_class >= c {
            return Err(bad(format!("class id outside 0..{c}")));
        }
        let probs = (3..c + 3)
            .map(|k| match row[k].parse::<f64>() {
                Ok(p) if p.is_finite() => Ok(p),
                _ => Err(bad(format!("bad probability `{}`", &row[k]))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(ConfidenceRecord {
            sample_id,
            true_class,
            predicted_class,
            probs,
        });
    }
    Ok(out)
}
