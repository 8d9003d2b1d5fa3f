//! SGD, the training loop, evaluation and repeated-run aggregation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    batches, build_imbalanced_split, DataError, Dataset, ImbalanceSpec, SplitBundle,
};
use crate::loss::{
    class_weights_from_counts, cross_entropy, LossError, LossKind, LossSpec, Targets,
};
use crate::metrics::{MetricsError, MetricsReport};
use crate::nn::{
    build_fc_model, build_simple_cnn, Activation, CnnConfig, FcConfig, Mode, Model, ModelError,
    OutputActivation,
};
use crate::tensor::{Tape, Tensor, TensorError};

/// Rows per forward pass when scoring a whole split.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error("training split of {samples} samples yields no batch of {batch_size}")]
    NoBatches { samples: usize, batch_size: usize },
    #[error("{params} parameters but {grads} gradients")]
    ParamMismatch { params: usize, grads: usize },
    #[error("parameter {index} has shape {param:?} but its gradient has {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay, one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * p); p <- p + v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(TrainError::ParamMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    let OptimizerConfig {
        learning_rate: lr,
        momentum: mu,
        weight_decay: wd,
    } = state.config;
    for (index, ((p, g), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.velocity)
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::ShapeMismatch {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv - lr * (gv + wd * *pv);
            *pv += *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Fc,
    SimpleCnn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fc => "fc",
            Architecture::SimpleCnn => "simple_cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight classes by `N / (C · N_c)` over the training split.
    pub weighted: bool,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cce,
            weighted: false,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn resolve(&self, train_counts: &[usize]) -> Result<LossSpec, LossError> {
        Ok(LossSpec {
            kind: self.kind,
            class_weights: if self.weighted {
                Some(class_weights_from_counts(train_counts)?)
            } else {
                None
            },
            label_smoothing: self.label_smoothing,
        })
    }

    /// Short label such as `cce`, `bce+wl` or `cce+ls0.1`.
    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.weighted {
            s.push_str("+wl");
        }
        if self.label_smoothing > 0.0 {
            s.push_str(&format!("+ls{}", self.label_smoothing));
        }
        s
    }
}

/// Everything that determines a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub output: OutputActivation,
    pub final_bn: bool,
    pub first_bn: bool,
    pub use_bias_last: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    pub hidden: usize,
    pub activation: Activation,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub strip_bn_at_inference: bool,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub imbalance: ImbalanceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Fc,
            output: OutputActivation::Softmax,
            final_bn: false,
            first_bn: false,
            use_bias_last: true,
            dropout: None,
            hidden: 128,
            activation: Activation::Relu,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            strip_bn_at_inference: false,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            imbalance: ImbalanceSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn num_classes(&self) -> usize {
        self.imbalance.num_classes()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.imbalance.validate()?;
        self.optimizer.validate()?;
        let c = self.num_classes();
        if self.output == OutputActivation::Sigmoid && c != 2 {
            return bad(format!(
                "sigmoid output needs a binary task, got {c} classes"
            ));
        }
        if self.loss.kind == LossKind::Bce && self.output == OutputActivation::Softmax && c < 2 {
            return bad("bce needs at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return bad(format!(
                "label_smoothing {} outside [0, 1)",
                self.loss.label_smoothing
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        if let Some(r) = self.dropout {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("dropout {r} outside [0, 1)"));
            }
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.arch == Architecture::SimpleCnn && self.first_bn {
            return bad("first_bn applies to the fc architecture only".into());
        }
        if self.strip_bn_at_inference && !self.final_bn {
            return bad("strip_bn_at_inference needs final_bn".into());
        }
        Ok(())
    }

    /// Freshly initialized model for this configuration.
    pub fn build_model(&self, seed: u64) -> Result<Model, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Purpose::Init));
        let model = match self.arch {
            Architecture::Fc => build_fc_model(
                &FcConfig {
                    num_classes: self.num_classes(),
                    first_bn: self.first_bn,
                    final_bn: self.final_bn,
                    output: self.output,
                    hidden: self.hidden,
                    hidden_activation: self.activation,
                    use_bias_last: self.use_bias_last,
                    dropout: self.dropout,
                    input_features: 28 * 28,
                },
                &mut rng,
            )?,
            Architecture::SimpleCnn => build_simple_cnn(
                &CnnConfig {
                    num_classes: self.num_classes(),
                    final_bn: self.final_bn,
                    output: self.output,
                    use_bias_last: self.use_bias_last,
                    dropout: self.dropout,
                    in_channels: 1,
                },
                &mut rng,
            )?,
        };
        Ok(model)
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Purpose {
    Split = 1,
    Init = 2,
    Shuffle = 3,
    Dropout = 4,
}

/// SplitMix64 of `seed` mixed with a per-purpose constant.
pub fn derive_seed(seed: u64, purpose: Purpose) -> u64 {
    let mut z = seed ^ (purpose as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

fn diverged(epoch: usize, batch: usize, reason: impl ToString) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        reason: reason.to_string(),
    }
}

/// Trains `model` on `bundle.train` and returns it in infer mode.
pub fn train(
    mut model: Model,
    bundle: &SplitBundle,
    cfg: &ExperimentConfig,
) -> Result<(Model, History), TrainError> {
    cfg.validate()?;
    let train_set = &bundle.train;
    let spec = cfg.loss.resolve(&train_set.class_counts())?;
    spec.validate(train_set.num_classes())?;
    let mut history = History::default();
    if cfg.epochs > 0 && train_set.len() < cfg.batch_size {
        return Err(TrainError::NoBatches {
            samples: train_set.len(),
            batch_size: cfg.batch_size,
        });
    }
    #[cfg(debug_assertions)]
    let held_out: std::collections::HashSet<usize> = bundle
        .val
        .sample_ids
        .iter()
        .chain(&bundle.test.sample_ids)
        .copied()
        .collect();

    let mut opt = OptimizerState::new(cfg.optimizer, &model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Purpose::Dropout));
    let shuffle_seed = derive_seed(cfg.seed, Purpose::Shuffle);
    model.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches(
            train_set,
            cfg.batch_size,
            shuffle_seed,
            epoch as u64,
            Mode::Train,
        )?
        .enumerate()
        {
            #[cfg(debug_assertions)]
            debug_assert!(batch.sample_ids.iter().all(|id| !held_out.contains(id)));
            let tape = Tape::new();
            let x = tape.constant(batch.images);
            let pass = match model.forward_train(&tape, x, Some(&mut dropout_rng)) {
                Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                    return Err(diverged(epoch, b, op))
                }
                other => other?,
            };
            let loss = match cross_entropy(pass.output, Targets::Classes(&batch.labels), &spec) {
                Err(LossError::Tensor(TensorError::NonFinite { op })) => {
                    return Err(diverged(epoch, b, op))
                }
                other => other?,
            };
            let value = loss.value().item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(diverged(epoch, b, "non-finite loss"));
            }
            let grads = match tape.backward(loss) {
                Err(TensorError::NonFinite { op }) => return Err(diverged(epoch, b, op)),
                other => other.map_err(ModelError::from)?,
            };
            let grads: Vec<Tensor> = pass.params.iter().map(|&p| grads.wrt(p)).collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged(epoch, b, "non-finite gradient"));
            }
            sgd_step(&mut model.params_mut(), &grads, &mut opt)?;
            total += value;
            count += 1;
        }
        history.epoch_loss.push(total / count.max(1) as f64);
    }
    model.set_mode(Mode::Infer);
    Ok((model, history))
}

/// Class probabilities for every sample of `split`, in stored order.
pub fn predict_split(model: &Model, split: &Dataset) -> Result<Tensor, TrainError> {
    Ok(model.predict_batched(&split.images, EVAL_CHUNK)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub parameter_count: usize,
    pub stripped: bool,
}

/// Scores `model` on `split`, optionally with its final batch norm removed.
pub fn evaluate(model: &Model, split: &Dataset, strip_bn: bool) -> Result<Evaluation, TrainError> {
    let stripped;
    let scored = if strip_bn {
        stripped = model.strip_final_bn()?;
        &stripped
    } else {
        model
    };
    let probs = predict_split(scored, split)?;
    if !probs.all_finite() {
        return Err(TrainError::Diverged {
            epoch: 0,
            batch: 0,
            reason: "non-finite prediction at evaluation".into(),
        });
    }
    Ok(Evaluation {
        report: MetricsReport::compute(&probs, &split.labels, &split.sample_ids)?,
        parameter_count: scored.parameter_count(),
        stripped: strip_bn,
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub history: History,
    pub val: Evaluation,
    pub test: Evaluation,
    /// Test scores with the final batch norm removed, for final-BN models
    /// evaluated with it kept.
    pub stripped_test: Option<Evaluation>,
    pub wall_seconds: f64,
    pub parameter_count: usize,
    pub model: Model,
}

/// One seeded run: split, initialize, train, score val and test.
pub fn run_once(cfg: &ExperimentConfig, source: &Dataset) -> Result<RunResult, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let bundle = build_imbalanced_split(
        source,
        &cfg.imbalance,
        derive_seed(cfg.seed, Purpose::Split),
    )?;
    let model = cfg.build_model(cfg.seed)?;
    let (model, history) = train(model, &bundle, cfg)?;
    let strip = cfg.strip_bn_at_inference;
    let val = evaluate(&model, &bundle.val, strip)?;
    let test = evaluate(&model, &bundle.test, strip)?;
    let stripped_test = if cfg.final_bn && !strip {
        Some(evaluate(&model, &bundle.test, true)?)
    } else {
        None
    };
    Ok(RunResult {
        config: cfg.clone(),
        seed: cfg.seed,
        history,
        parameter_count: model.parameter_count(),
        val,
        test,
        stripped_test,
        wall_seconds: start.elapsed().as_secs_f64(),
        model,
    })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub per_class: Vec<ClassSummary>,
    pub accuracy: MeanStd,
    pub ece: MeanStd,
    pub brier: MeanStd,
}

/// Aggregates test metrics over runs.
pub fn summarize(runs: &[RunResult]) -> Summary {
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.test.report).collect();
    summarize_reports(&reports)
}

pub fn summarize_reports(reports: &[&MetricsReport]) -> Summary {
    let classes = reports.first().map_or(0, |r| r.per_class.len());
    let col = |f: &dyn Fn(&MetricsReport) -> f64| {
        MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    Summary {
        runs: reports.len(),
        per_class: (0..classes)
            .map(|c| ClassSummary {
                class: c,
                precision: col(&|r| r.per_class[c].precision),
                recall: col(&|r| r.per_class[c].recall),
                f1: col(&|r| r.per_class[c].f1),
            })
            .collect(),
        accuracy: col(&|r| r.accuracy),
        ece: col(&|r| r.ece),
        brier: col(&|r| r.brier),
    }
}

/// Applies `f` to every item on up to `workers` threads; results keep input
/// order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Repeats `cfg` with seeds `seed, seed + 1, …` and aggregates test metrics.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    source: &Dataset,
    repeats: usize,
    workers: usize,
) -> Result<(Vec<RunResult>, Summary), TrainError> {
    if repeats == 0 {
        return Err(TrainError::Config("repeats must be at least 1".into()));
    }
    cfg.validate()?;
    let configs: Vec<ExperimentConfig> = (0..repeats as u64)
        .map(|k| ExperimentConfig {
            seed: cfg.seed.wrapping_add(k),
            ..cfg.clone()
        })
        .collect();
    let runs = parallel_map(&configs, workers, |c| run_once(c, source))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&runs);
    Ok((runs, summary))
}
