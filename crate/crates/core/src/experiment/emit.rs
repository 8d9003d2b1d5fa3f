use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::config_hash;
use super::preset::SweepAxis;
use super::run::ExecutedPlan;
use super::ExperimentError;
use crate::metrics::{confidence_profile, write_confidence_dump};
use crate::train::{summarize_reports, ExperimentConfig, MeanStd};

pub const RESULT_COLUMNS: [&str; 23] = [
    "run_id",
    "seed",
    "arch",
    "final_bn",
    "first_bn",
    "output",
    "loss",
    "ratio",
    "batch_size",
    "epochs",
    "class",
    "precision",
    "recall",
    "f1",
    "ece",
    "brier",
    "variant",
    "minority",
    "strip_bn",
    "lr",
    "momentum",
    "weight_decay",
    "config_hash",
];

pub const SWEEP_COLUMNS: [&str; 5] = ["axis_value", "variant", "class", "f1_mean", "f1_std"];

/// `x` rounded to six significant digits and printed in its shortest form,
/// e.g. `0.929876543` becomes `0.929877`.
pub fn format_sig6(x: f64) -> String {
    format!("{}", round_sig6(x))
}

fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}")
        .parse()
        .expect("scientific notation parses back")
}

/// One class of one run, scored on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub arch: String,
    pub final_bn: bool,
    pub first_bn: bool,
    pub output: String,
    pub loss: String,
    pub ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ece: f64,
    pub brier: f64,
    pub variant: String,
    pub minority: bool,
    pub strip_bn: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub config_hash: String,
}

fn run_id(variant: &str, seed: u64) -> String {
    format!("{variant}.s{seed}")
}

pub fn result_rows(done: &ExecutedPlan) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (e, entry) in done.plan.entries.iter().enumerate() {
        for k in 0..done.plan.repeats {
            let cfg = done.plan.run_config(e, k);
            let report = &done.evaluation(e, k).report;
            let hash = config_hash(&cfg);
            let minority = cfg.imbalance.minority_ids();
            for (class, (label, scores)) in cfg
                .imbalance
                .class_order()
                .zip(&report.per_class)
                .enumerate()
            {
                rows.push(ResultRow {
                    run_id: run_id(&entry.variant, cfg.seed),
                    seed: cfg.seed,
                    arch: cfg.arch.name().into(),
                    final_bn: cfg.final_bn,
                    first_bn: cfg.first_bn,
                    output: cfg.output.name().into(),
                    loss: cfg.loss.label(),
                    ratio: cfg.imbalance.ratio,
                    batch_size: cfg.batch_size,
                    epochs: cfg.epochs,
                    class: label.to_string(),
                    precision: round_sig6(scores.precision),
                    recall: round_sig6(scores.recall),
                    f1: round_sig6(scores.f1),
                    ece: round_sig6(report.ece),
                    brier: round_sig6(report.brier),
                    variant: entry.variant.clone(),
                    minority: minority.contains(&class),
                    strip_bn: cfg.strip_bn_at_inference,
                    lr: cfg.optimizer.learning_rate,
                    momentum: cfg.optimizer.momentum,
                    weight_decay: cfg.optimizer.weight_decay,
                    config_hash: hash.clone(),
                });
            }
        }
    }
    rows
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS).map_err(results_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(results_err)?;
    }
    w.flush()
        .map_err(|e| ExperimentError::Results(e.to_string()))
}

/// Strict reader: the header must match [`RESULT_COLUMNS`] exactly.
pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(results_err)?;
    if header.iter().ne(RESULT_COLUMNS) {
        return Err(ExperimentError::Results(format!(
            "header must be {}",
            RESULT_COLUMNS.join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(results_err)).collect()
}

fn results_err(e: csv::Error) -> ExperimentError {
    ExperimentError::Results(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: String,
    pub minority: bool,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Median `P(true class)` over correctly classified samples, averaged
    /// over the runs where the class had any.
    pub correct_confidence: Option<f64>,
    pub reference_f1: Option<f64>,
}

/// Aggregate of one plan entry over its repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub variant: String,
    pub group: String,
    pub axis_value: Option<f64>,
    pub config_hash: String,
    pub runs: usize,
    pub classes: Vec<ClassEntry>,
    pub accuracy: MeanStd,
    pub ece: MeanStd,
    pub brier: MeanStd,
    pub expected_best: bool,
}

pub fn summarize_entries(done: &ExecutedPlan) -> Vec<EntrySummary> {
    done.plan
        .entries
        .iter()
        .enumerate()
        .map(|(e, entry)| {
            let reports = done.reports(e);
            let s = summarize_reports(&reports);
            let spec = &entry.config.imbalance;
            let minority = spec.minority_ids();
            let profiles: Vec<_> = reports
                .iter()
                .map(|r| confidence_profile(&r.confidence))
                .collect();
            let classes = spec
                .class_order()
                .zip(s.per_class)
                .enumerate()
                .map(|(class, (label, cs))| {
                    let medians: Vec<f64> = profiles
                        .iter()
                        .filter_map(|p| {
                            p.iter()
                                .find(|c| c.class == class)
                                .and_then(|c| c.correct_median)
                        })
                        .collect();
                    ClassEntry {
                        class: label.to_string(),
                        minority: minority.contains(&class),
                        precision: cs.precision,
                        recall: cs.recall,
                        f1: cs.f1,
                        correct_confidence: (!medians.is_empty())
                            .then(|| MeanStd::of(&medians).mean),
                        reference_f1: entry
                            .reference
                            .iter()
                            .find(|(l, _)| *l == label)
                            .map(|&(_, f)| f),
                    }
                })
                .collect();
            EntrySummary {
                variant: entry.variant.clone(),
                group: entry.group.clone(),
                axis_value: entry.axis_value,
                config_hash: config_hash(&entry.config),
                runs: s.runs,
                classes,
                accuracy: s.accuracy,
                ece: s.ece,
                brier: s.brier,
                expected_best: entry.expected_best,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub variant: String,
    pub class: String,
    pub f1_mean: f64,
    pub f1_std: f64,
}

/// Per sweep point, variant and class: F1 mean and deviation over repeats.
pub fn sweep_rows(summaries: &[EntrySummary]) -> Vec<SweepRow> {
    summaries
        .iter()
        .filter_map(|s| s.axis_value.map(|v| (v, s)))
        .flat_map(|(v, s)| {
            s.classes.iter().map(move |c| SweepRow {
                axis_value: v,
                variant: s.group.clone(),
                class: c.class.clone(),
                f1_mean: round_sig6(c.f1.mean),
                f1_std: round_sig6(c.f1.std),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SWEEP_COLUMNS).map_err(results_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(results_err)?;
    }
    w.flush()
        .map_err(|e| ExperimentError::Results(e.to_string()))
}

/// Plain-text table of measured against published F1.
pub fn comparison_table(plan_name: &str, summaries: &[EntrySummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{plan_name}: test F1, mean ± std over runs (published value in brackets)"
    );
    let width = summaries
        .iter()
        .map(|s| s.variant.len())
        .max()
        .unwrap_or(0)
        .max(7);
    for s in summaries {
        let mut line = format!("{:<width$}", s.variant);
        for c in &s.classes {
            let tag = if c.minority { "*" } else { "" };
            let _ = write!(
                line,
                "  {}{tag}: {:.4} ± {:.4}",
                c.class, c.f1.mean, c.f1.std
            );
            if let Some(r) = c.reference_f1 {
                let _ = write!(line, " [{r:.2}]");
            }
        }
        let _ = write!(line, "  ece {:.4}  brier {:.4}", s.ece.mean, s.brier.mean);
        if s.expected_best {
            line.push_str("  <- expected best");
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str("* minority class\n");
    out
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    variant: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct ResultsJson<'a> {
    plan: &'a str,
    repeats: usize,
    configs: Vec<ConfigEcho<'a>>,
    rows: &'a [ResultRow],
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    plan: &'a str,
    repeats: usize,
    axis: Option<SweepAxis>,
    entries: &'a [EntrySummary],
}

#[derive(Serialize)]
struct RunTiming {
    run_id: String,
    wall_seconds: f64,
    parameter_count: usize,
    epoch_loss: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ExperimentError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| ExperimentError::Results(e.to_string()))?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(|e| ExperimentError::io(path, e))
}

/// Writes every artifact of a finished plan under `out_dir` and returns the
/// per-entry summaries. Timing goes to `runs.json` only, so the other files
/// depend on configuration and seeds alone.
pub fn write_outputs(
    done: &ExecutedPlan,
    out_dir: &Path,
) -> Result<Vec<EntrySummary>, ExperimentError> {
    let conf_dir = out_dir.join("confidence");
    fs::create_dir_all(&conf_dir).map_err(|e| ExperimentError::io(&conf_dir, e))?;
    let plan = &done.plan;
    let rows = result_rows(done);
    let summaries = summarize_entries(done);

    let csv_path = out_dir.join("results.csv");
    let mut f = create(&csv_path)?;
    write_results_csv(&rows, &mut f)?;
    f.flush().map_err(|e| ExperimentError::io(&csv_path, e))?;

    let configs = plan
        .entries
        .iter()
        .map(|e| ConfigEcho {
            variant: &e.variant,
            config_hash: config_hash(&e.config),
            config: &e.config,
        })
        .collect();
    write_json(
        &out_dir.join("results.json"),
        &ResultsJson {
            plan: &plan.name,
            repeats: plan.repeats,
            configs,
            rows: &rows,
        },
    )?;
    write_json(
        &out_dir.join("summary.json"),
        &SummaryJson {
            plan: &plan.name,
            repeats: plan.repeats,
            axis: plan.axis,
            entries: &summaries,
        },
    )?;

    let mut timings = Vec::new();
    for (e, entry) in plan.entries.iter().enumerate() {
        for k in 0..plan.repeats {
            let run = &done.runs[e][k];
            let id = run_id(&entry.variant, run.seed);
            let path = conf_dir.join(format!("{id}.csv"));
            let mut f = create(&path)?;
            write_confidence_dump(&done.evaluation(e, k).report.confidence, &mut f)?;
            f.flush().map_err(|err| ExperimentError::io(&path, err))?;
            timings.push(RunTiming {
                run_id: id,
                wall_seconds: run.wall_seconds,
                parameter_count: done.evaluation(e, k).parameter_count,
                epoch_loss: run.history.epoch_loss.clone(),
            });
        }
    }
    write_json(&out_dir.join("runs.json"), &timings)?;

    if plan.axis.is_some() {
        let path = out_dir.join("sweep.csv");
        let mut f = create(&path)?;
        write_sweep_csv(&sweep_rows(&summaries), &mut f)?;
        f.flush().map_err(|e| ExperimentError::io(&path, e))?;
    }
    let table = comparison_table(&plan.name, &summaries);
    let path = out_dir.join("comparison.txt");
    fs::write(&path, table).map_err(|e| ExperimentError::io(&path, e))?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.929876543), "0.929877");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(123456789.0), "123457000");
        assert_eq!(format_sig6(-0.000123456789), "-0.000123457");
    }

    fn row() -> ResultRow {
        ResultRow {
            run_id: "softmax-cce.s0".into(),
            seed: 0,
            arch: "fc".into(),
            final_bn: true,
            first_bn: false,
            output: "softmax".into(),
            loss: "cce".into(),
            ratio: 0.01,
            batch_size: 64,
            epochs: 100,
            class: "3".into(),
            precision: round_sig6(0.929876543),
            recall: 1.0,
            f1: round_sig6(2.0 / 3.0),
            ece: 0.0,
            brier: round_sig6(0.1234567),
            variant: "softmax-cce".into(),
            minority: true,
            strip_bn: false,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            config_hash: "0123456789abcdef".into(),
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let rows = vec![row()];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
        assert!(text.contains(",0.929877,"));
        let back = read_results_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let json = serde_json::to_string(&back).unwrap();
        let again: Vec<ResultRow> = serde_json::from_str(&json).unwrap();
        assert_eq!(again, rows);
    }

    #[test]
    fn reader_rejects_wrong_header() {
        let text = "run_id,seed\nx,1\n";
        assert!(read_results_csv(text.as_bytes()).is_err());
        let mut buf = Vec::new();
        write_results_csv(&[row()], &mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replace(",true,false,softmax", ",yes,false,softmax");
        assert!(read_results_csv(text.as_bytes()).is_err());
    }
}
