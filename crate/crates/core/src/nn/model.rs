use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNormState, BatchStats};
use super::layers::{dropout_forward, Activation, ConvState, DenseState};
use super::{Mode, ModelError};
use crate::tensor::{Tape, Tensor, Var};

/// Channel plan of the five 3×3 convolution blocks in [`build_simple_cnn`].
pub const CNN_CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Softmax => "softmax",
            OutputActivation::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Flatten,
    Dense(DenseState),
    BatchNorm(BatchNormState),
    Conv2d(ConvState),
    MaxPool2d(usize),
    GlobalAvgPool,
    Activation(Activation),
    Dropout(f64),
    Softmax,
    Sigmoid,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::GlobalAvgPool => "gap",
            Layer::Activation(a) => a.name(),
            Layer::Dropout(_) => "dropout",
            Layer::Softmax => "softmax",
            Layer::Sigmoid => "sigmoid",
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.parameter_count(),
            Layer::BatchNorm(b) => b.parameter_count(),
            Layer::Conv2d(c) => c.parameter_count(),
            _ => 0,
        }
    }

    fn is_output(&self) -> bool {
        matches!(self, Layer::Softmax | Layer::Sigmoid)
    }

    fn trainable(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => std::iter::once(&d.weight).chain(d.bias.as_ref()).collect(),
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Conv2d(c) => std::iter::once(&c.kernels).chain(c.bias.as_ref()).collect(),
            _ => Vec::new(),
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => std::iter::once(&mut d.weight)
                .chain(d.bias.as_mut())
                .collect(),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Conv2d(c) => std::iter::once(&mut c.kernels)
                .chain(c.bias.as_mut())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Result of one forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardPass<'t> {
    /// Output after the final activation (class probabilities).
    pub output: Var<'t>,
    /// Value entering the final activation.
    pub logits: Var<'t>,
    /// Trainable parameters registered as leaves, in [`Model::params_mut`] order.
    pub params: Vec<Var<'t>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    mode: Mode,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            mode: Mode::Train,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Trainable tensors in a fixed order shared with [`ForwardPass::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(Layer::trainable_mut)
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::trainable).collect()
    }

    /// Index of the batch norm sitting directly before the output activation.
    pub fn final_bn_index(&self) -> Option<usize> {
        let end = match self.layers.last() {
            Some(l) if l.is_output() => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        let idx = end.checked_sub(1)?;
        matches!(self.layers[idx], Layer::BatchNorm(_)).then_some(idx)
    }

    pub fn final_bn(&self) -> Option<&BatchNormState> {
        self.final_bn_index().map(|i| match &self.layers[i] {
            Layer::BatchNorm(b) => b,
            _ => unreachable!("final_bn_index points at a batch norm"),
        })
    }

    /// Copy of the model with the final batch norm removed; every other
    /// parameter is untouched.
    pub fn strip_final_bn(&self) -> Result<Model, ModelError> {
        let idx = self.final_bn_index().ok_or(ModelError::NoFinalBatchNorm)?;
        let mut layers = self.layers.clone();
        layers.remove(idx);
        Ok(Model {
            layers,
            mode: self.mode,
        })
    }

    /// Train-mode pass: parameters become tape leaves and batch norm running
    /// statistics are updated from this batch.
    pub fn forward_train<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass<'t>, ModelError> {
        let (pass, stats) = self.run(tape, x, Mode::Train, true, rng)?;
        for (idx, s) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[idx] {
                bn.update_running(&s);
            }
        }
        Ok(pass)
    }

    /// Inference pass with running statistics and dropout disabled.
    pub fn forward_infer<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<ForwardPass<'t>, ModelError> {
        Ok(self.run(tape, x, Mode::Infer, false, None)?.0)
    }

    /// Class probabilities for `x` in inference mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        Ok(self
            .forward_infer(&tape, tape.constant(x.clone()))?
            .output
            .value())
    }

    /// Pre-activation outputs for `x` in inference mode.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        Ok(self
            .forward_infer(&tape, tape.constant(x.clone()))?
            .logits
            .value())
    }

    /// [`Model::predict`] over row chunks of at most `chunk` samples.
    pub fn predict_batched(&self, x: &Tensor, chunk: usize) -> Result<Tensor, ModelError> {
        let n = x.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut out: Vec<f64> = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let probs = self.predict(&x.select_rows(&idx))?;
            width = probs.shape()[1];
            out.extend_from_slice(probs.data());
        }
        Ok(Tensor::from_vec(&[n, width], out)?)
    }

    fn run<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: Mode,
        track: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardPass<'t>, Vec<(usize, BatchStats)>), ModelError> {
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut param = |t: &Tensor| {
            if track {
                let v = tape.leaf(t.clone());
                params.push(v);
                v
            } else {
                tape.constant(t.clone())
            }
        };
        let mut h = x;
        let mut logits = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Flatten => {
                    let shape = h.shape();
                    let n = shape.first().copied().unwrap_or(0);
                    let rest = shape.iter().skip(1).product();
                    h.reshape(&[n, rest])?
                }
                Layer::Dense(d) => {
                    let w = param(&d.weight);
                    let b = d.bias.as_ref().map(&mut param);
                    d.forward(h, w, b)?
                }
                Layer::BatchNorm(bn) => {
                    let g = param(&bn.gamma);
                    let b = param(&bn.beta);
                    let (y, s) = bn.forward_with(h, g, b, mode)?;
                    if let Some(s) = s {
                        stats.push((idx, s));
                    }
                    y
                }
                Layer::Conv2d(c) => {
                    let k = param(&c.kernels);
                    let b = c.bias.as_ref().map(&mut param);
                    c.forward(h, k, b)?
                }
                Layer::MaxPool2d(size) => h.max_pool2d(*size)?,
                Layer::GlobalAvgPool => h.global_avg_pool()?,
                Layer::Activation(a) => a.apply(h)?,
                Layer::Dropout(rate) => dropout_forward(
                    *rate,
                    h,
                    mode,
                    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
                )?,
                Layer::Softmax => {
                    logits = Some(h);
                    h.softmax()?
                }
                Layer::Sigmoid => {
                    logits = Some(h);
                    h.sigmoid()?
                }
            };
        }
        Ok((
            ForwardPass {
                output: h,
                logits: logits.unwrap_or(h),
                params,
            },
            stats,
        ))
    }
}

/// One-hidden-layer classifier over flattened 28×28 input.
#[derive(Clone, Debug, PartialEq)]
pub struct FcConfig {
    pub num_classes: usize,
    pub first_bn: bool,
    pub final_bn: bool,
    pub output: OutputActivation,
    pub hidden: usize,
    pub hidden_activation: Activation,
    pub use_bias_last: bool,
    pub dropout: Option<f64>,
    pub input_features: usize,
}

impl Default for FcConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            first_bn: false,
            final_bn: false,
            output: OutputActivation::Softmax,
            hidden: 128,
            hidden_activation: Activation::Relu,
            use_bias_last: true,
            dropout: None,
            input_features: 28 * 28,
        }
    }
}

/// Number of output units for a head; sigmoid uses a single unit.
fn output_width(num_classes: usize, output: OutputActivation) -> Result<usize, ModelError> {
    match output {
        OutputActivation::Softmax if num_classes >= 2 => Ok(num_classes),
        OutputActivation::Softmax => Err(ModelError::InvalidConfig(format!(
            "softmax output needs at least 2 classes, got {num_classes}"
        ))),
        OutputActivation::Sigmoid if (1..=2).contains(&num_classes) => Ok(1),
        OutputActivation::Sigmoid => Err(ModelError::InvalidConfig(format!(
            "sigmoid output supports binary tasks only, got {num_classes} classes"
        ))),
    }
}

fn check_dropout(rate: Option<f64>) -> Result<(), ModelError> {
    match rate {
        Some(r) if !(0.0..1.0).contains(&r) => Err(ModelError::DropoutRate(r)),
        _ => Ok(()),
    }
}

fn push_head(layers: &mut Vec<Layer>, final_bn: bool, width: usize, output: OutputActivation) {
    if final_bn {
        layers.push(Layer::BatchNorm(BatchNormState::new(width)));
    }
    layers.push(match output {
        OutputActivation::Softmax => Layer::Softmax,
        OutputActivation::Sigmoid => Layer::Sigmoid,
    });
}

/// `Flatten → Dense(in→hidden) → [BN] → act → [Dropout] → Dense(hidden→C) → [BN] → output`.
pub fn build_fc_model(cfg: &FcConfig, rng: &mut dyn RngCore) -> Result<Model, ModelError> {
    let width = output_width(cfg.num_classes, cfg.output)?;
    check_dropout(cfg.dropout)?;
    if cfg.hidden == 0 || cfg.input_features == 0 {
        return Err(ModelError::InvalidConfig(
            "layer widths must be positive".into(),
        ));
    }
    let mut layers = vec![
        Layer::Flatten,
        Layer::Dense(DenseState::init(cfg.input_features, cfg.hidden, true, rng)),
    ];
    if cfg.first_bn {
        layers.push(Layer::BatchNorm(BatchNormState::new(cfg.hidden)));
    }
    layers.push(Layer::Activation(cfg.hidden_activation));
    if let Some(rate) = cfg.dropout {
        layers.push(Layer::Dropout(rate));
    }
    layers.push(Layer::Dense(DenseState::init(
        cfg.hidden,
        width,
        cfg.use_bias_last,
        rng,
    )));
    push_head(&mut layers, cfg.final_bn, width, cfg.output);
    Ok(Model::new(layers))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub num_classes: usize,
    pub final_bn: bool,
    pub output: OutputActivation,
    pub use_bias_last: bool,
    pub dropout: Option<f64>,
    pub in_channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            final_bn: false,
            output: OutputActivation::Softmax,
            use_bias_last: true,
            dropout: None,
            in_channels: 1,
        }
    }
}

/// Five 3×3 convolutions (padding 1) with ReLU, 2×2 max pooling after the
/// second and fourth, global average pooling, then a dense head.
pub fn build_simple_cnn(cfg: &CnnConfig, rng: &mut dyn RngCore) -> Result<Model, ModelError> {
    let width = output_width(cfg.num_classes, cfg.output)?;
    check_dropout(cfg.dropout)?;
    let mut layers = Vec::new();
    let mut in_ch = cfg.in_channels;
    for (block, &out_ch) in CNN_CHANNELS.iter().enumerate() {
        layers.push(Layer::Conv2d(ConvState::init(in_ch, out_ch, 3, 1, 1, rng)));
        layers.push(Layer::Activation(Activation::Relu));
        if block == 1 || block == 3 {
            layers.push(Layer::MaxPool2d(2));
        }
        in_ch = out_ch;
    }
    layers.push(Layer::GlobalAvgPool);
    if let Some(rate) = cfg.dropout {
        layers.push(Layer::Dropout(rate));
    }
    layers.push(Layer::Dense(DenseState::init(
        in_ch,
        width,
        cfg.use_bias_last,
        rng,
    )));
    push_head(&mut layers, cfg.final_bn, width, cfg.output);
    Ok(Model::new(layers))
}
