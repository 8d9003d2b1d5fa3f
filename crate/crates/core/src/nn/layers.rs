use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Mode, ModelError};
use crate::tensor::{Tensor, Var};

/// Fully connected layer computing `x · W (+ b)`, with `W` stored `[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseState {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DenseState {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn init(inputs: usize, outputs: usize, use_bias: bool, rng: &mut dyn RngCore) -> Self {
        Self {
            weight: kaiming(&[inputs, outputs], inputs, rng),
            bias: use_bias.then(|| Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn use_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.inputs() {
            return Err(ModelError::FeatureMismatch {
                expected: self.inputs(),
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let y = x.matmul(weight)?;
        Ok(match bias {
            Some(b) => y.add_bias(b)?,
            None => y,
        })
    }
}

/// 2-D cross-correlation layer with `[out×in×kh×kw]` kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvState {
    pub kernels: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvState {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            kernels: kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Some(Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let (kh, kw) = (self.kernels.shape()[2], self.kernels.shape()[3]);
        if self.stride == 0 || height + 2 * self.padding < kh || width + 2 * self.padding < kw {
            return None;
        }
        Some((
            (height + 2 * self.padding - kh) / self.stride + 1,
            (width + 2 * self.padding - kw) / self.stride + 1,
        ))
    }

    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        kernels: Var<'t>,
        bias: Option<Var<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(ModelError::FeatureMismatch {
                expected: self.in_channels(),
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        Ok(x.conv2d(kernels, bias, self.stride, self.padding)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Selu => x.selu()?,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
        }
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; infer mode is the
/// identity.
pub fn dropout_forward<'t>(
    rate: f64,
    x: Var<'t>,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var<'t>, ModelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::DropoutRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or(ModelError::MissingRng)?;
    let keep = 1.0 - rate;
    let n = x.with_value(Tensor::len);
    let mask = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    Ok(x.apply_mask(mask)?)
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}
