//! Line-oriented text checkpoints.
//!
//! ```text
//! IBNL1
//! mode infer
//! layer dense bias=true
//! param weight 784,128 0.01 -0.2 ...
//! param bias 128 0 0 ...
//! end
//! layer batchnorm epsilon=0.00001 momentum=0.1
//! param gamma 2 1 1
//! param beta 2 0 0
//! param running_mean 2 0.1 -0.1
//! param running_var 2 1.2 0.9
//! end
//! layer softmax
//! end
//! ```
//!
//! Floats are written with the shortest representation that round-trips, so
//! save followed by load reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Activation, BatchNormState, ConvState, DenseState, Layer, Mode, Model};
use crate::tensor::Tensor;

pub const MAGIC: &str = "IBNL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint ended inside a layer block")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fail<T>(line: usize, message: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Parse {
        line,
        message: message.into(),
    })
}

/// Serializes `model` into the checkpoint text format.
pub fn to_text(model: &Model) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let mode = match model.mode() {
        Mode::Train => "train",
        Mode::Infer => "infer",
    };
    let _ = writeln!(out, "mode {mode}");
    for layer in model.layers() {
        write_layer(&mut out, layer);
        out.push_str("end\n");
    }
    out
}

fn write_layer(out: &mut String, layer: &Layer) {
    match layer {
        Layer::Dense(d) => {
            let _ = writeln!(out, "layer dense bias={}", d.bias.is_some());
            write_param(out, "weight", d.weight.shape(), d.weight.data());
            if let Some(b) = &d.bias {
                write_param(out, "bias", b.shape(), b.data());
            }
        }
        Layer::BatchNorm(bn) => {
            let _ = writeln!(
                out,
                "layer batchnorm epsilon={:?} momentum={:?}",
                bn.epsilon, bn.momentum
            );
            let d = [bn.num_features()];
            write_param(out, "gamma", &d, bn.gamma.data());
            write_param(out, "beta", &d, bn.beta.data());
            write_param(out, "running_mean", &d, &bn.running_mean);
            write_param(out, "running_var", &d, &bn.running_var);
        }
        Layer::Conv2d(c) => {
            let _ = writeln!(
                out,
                "layer conv2d stride={} padding={} bias={}",
                c.stride,
                c.padding,
                c.bias.is_some()
            );
            write_param(out, "kernels", c.kernels.shape(), c.kernels.data());
            if let Some(b) = &c.bias {
                write_param(out, "bias", b.shape(), b.data());
            }
        }
        Layer::MaxPool2d(size) => {
            let _ = writeln!(out, "layer maxpool2d size={size}");
        }
        Layer::Dropout(rate) => {
            let _ = writeln!(out, "layer dropout rate={rate:?}");
        }
        other => {
            let _ = writeln!(out, "layer {}", other.kind());
        }
    }
}

fn write_param(out: &mut String, name: &str, shape: &[usize], values: &[f64]) {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let _ = write!(out, "param {name} {}", dims.join(","));
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    parse(&std::fs::read_to_string(path)?)
}

struct Block {
    line: usize,
    kind: String,
    attrs: BTreeMap<String, String>,
    params: BTreeMap<String, (usize, Tensor)>,
}

impl Block {
    fn attr<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = match self.attrs.get(key) {
            Some(v) => v,
            None => return fail(self.line, format!("{} layer missing `{key}`", self.kind)),
        };
        raw.parse()
            .or_else(|_| fail(self.line, format!("bad value `{raw}` for `{key}`")))
    }

    fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        match self.params.remove(name) {
            Some((_, t)) => Ok(t),
            None => fail(
                self.line,
                format!("{} layer missing param `{name}`", self.kind),
            ),
        }
    }

    fn take_rank(&mut self, name: &str, rank: usize) -> Result<Tensor, CheckpointError> {
        let line = self.params.get(name).map_or(self.line, |p| p.0);
        let t = self.take(name)?;
        if t.rank() != rank {
            return fail(
                line,
                format!("param `{name}` must have rank {rank}, got {:?}", t.shape()),
            );
        }
        Ok(t)
    }

    fn check_attrs(&self, allowed: &[&str]) -> Result<(), CheckpointError> {
        match self.attrs.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => fail(
                self.line,
                format!("unknown attribute `{k}` for {} layer", self.kind),
            ),
            None => Ok(()),
        }
    }

    fn finish(self, layer: Layer) -> Result<Layer, CheckpointError> {
        match self.params.into_iter().next() {
            Some((name, (line, _))) => fail(line, format!("unexpected param `{name}`")),
            None => Ok(layer),
        }
    }
}

/// Parses checkpoint text; any structural or shape inconsistency is an error.
pub fn parse(text: &str) -> Result<Model, CheckpointError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((n, other)) => {
            return fail(
                n,
                format!("expected `{MAGIC}` header, got `{}`", truncate(other)),
            )
        }
        None => return fail(1, "empty checkpoint"),
    }
    let mode = match lines.next() {
        Some((_, "mode train")) => Mode::Train,
        Some((_, "mode infer")) => Mode::Infer,
        Some((n, _)) => return fail(n, "expected `mode train` or `mode infer`"),
        None => return fail(2, "missing mode line"),
    };
    let mut layers = Vec::new();
    let mut block: Option<Block> = None;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let head = parts.next().unwrap_or("");
        match (head, block.as_mut()) {
            ("layer", None) => {
                let kind = match parts.next() {
                    Some(k) if !k.is_empty() => k.to_string(),
                    _ => return fail(n, "layer kind missing"),
                };
                let mut attrs = BTreeMap::new();
                for kv in parts {
                    let (k, v) = match kv.split_once('=') {
                        Some(p) => p,
                        None => {
                            return fail(n, format!("expected key=value, got `{}`", truncate(kv)))
                        }
                    };
                    if attrs.insert(k.to_string(), v.to_string()).is_some() {
                        return fail(n, format!("duplicate attribute `{k}`"));
                    }
                }
                block = Some(Block {
                    line: n,
                    kind,
                    attrs,
                    params: BTreeMap::new(),
                });
            }
            ("param", Some(b)) => {
                let name = parts.next().unwrap_or("").to_string();
                if name.is_empty() {
                    return fail(n, "param name missing");
                }
                let shape = parse_dims(parts.next().unwrap_or(""), n)?;
                let mut values = Vec::new();
                for tok in parts {
                    match tok.parse::<f64>() {
                        Ok(v) if v.is_finite() => values.push(v),
                        _ => return fail(n, format!("bad number `{}`", truncate(tok))),
                    }
                }
                let tensor =
                    Tensor::from_vec(&shape, values).or_else(|e| fail(n, e.to_string()))?;
                if b.params.insert(name.clone(), (n, tensor)).is_some() {
                    return fail(n, format!("duplicate param `{name}`"));
                }
            }
            ("end", Some(_)) => {
                let b = block.take().expect("matched Some");
                layers.push(build_layer(b)?);
            }
            ("layer", Some(_)) => return fail(n, "nested layer block"),
            (_, None) => return fail(n, format!("expected `layer`, got `{}`", truncate(line))),
            (_, Some(_)) => {
                return fail(
                    n,
                    format!("expected `param` or `end`, got `{}`", truncate(line)),
                )
            }
        }
    }
    if block.is_some() {
        return Err(CheckpointError::Truncated);
    }
    let mut model = Model::new(layers);
    model.set_mode(mode);
    Ok(model)
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn parse_dims(raw: &str, line: usize) -> Result<Vec<usize>, CheckpointError> {
    if raw.is_empty() {
        return fail(line, "param shape missing");
    }
    let dims = raw
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .or_else(|_| fail(line, format!("bad shape `{}`", truncate(raw))))?;
    if dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .is_none()
    {
        return fail(line, "shape overflows");
    }
    Ok(dims)
}

fn build_layer(mut b: Block) -> Result<Layer, CheckpointError> {
    let line = b.line;
    let layer = match b.kind.as_str() {
        "dense" => {
            b.check_attrs(&["bias"])?;
            let has_bias: bool = b.attr("bias")?;
            let weight = b.take_rank("weight", 2)?;
            let bias = if has_bias {
                Some(b.take_rank("bias", 1)?)
            } else {
                None
            };
            if let Some(bias) = &bias {
                if bias.len() != weight.shape()[1] {
                    return fail(line, "dense bias length differs from output width");
                }
            }
            Layer::Dense(DenseState { weight, bias })
        }
        "batchnorm" => {
            b.check_attrs(&["epsilon", "momentum"])?;
            let epsilon: f64 = b.attr("epsilon")?;
            let momentum: f64 = b.attr("momentum")?;
            if !(epsilon > 0.0 && epsilon.is_finite()) || !(0.0..=1.0).contains(&momentum) {
                return fail(
                    line,
                    "batch norm epsilon must be positive and momentum in [0, 1]",
                );
            }
            let gamma = b.take_rank("gamma", 1)?;
            let beta = b.take_rank("beta", 1)?;
            let running_mean = b.take_rank("running_mean", 1)?.into_data();
            let running_var = b.take_rank("running_var", 1)?.into_data();
            let d = gamma.len();
            if beta.len() != d || running_mean.len() != d || running_var.len() != d {
                return fail(line, "batch norm params differ in length");
            }
            if running_var.iter().any(|&v| v < 0.0) {
                return fail(line, "negative running variance");
            }
            Layer::BatchNorm(BatchNormState {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
                momentum,
            })
        }
        "conv2d" => {
            b.check_attrs(&["stride", "padding", "bias"])?;
            let stride: usize = b.attr("stride")?;
            let padding: usize = b.attr("padding")?;
            let has_bias: bool = b.attr("bias")?;
            if stride == 0 {
                return fail(line, "conv stride must be positive");
            }
            let kernels = b.take_rank("kernels", 4)?;
            let bias = if has_bias {
                Some(b.take_rank("bias", 1)?)
            } else {
                None
            };
            if let Some(bias) = &bias {
                if bias.len() != kernels.shape()[0] {
                    return fail(line, "conv bias length differs from output channels");
                }
            }
            Layer::Conv2d(ConvState {
                kernels,
                bias,
                stride,
                padding,
            })
        }
        "maxpool2d" => {
            b.check_attrs(&["size"])?;
            let size: usize = b.attr("size")?;
            if size == 0 {
                return fail(line, "pool size must be positive");
            }
            Layer::MaxPool2d(size)
        }
        "dropout" => {
            b.check_attrs(&["rate"])?;
            let rate: f64 = b.attr("rate")?;
            if !(0.0..1.0).contains(&rate) {
                return fail(line, format!("dropout rate {rate} outside [0, 1)"));
            }
            Layer::Dropout(rate)
        }
        "flatten" | "gap" | "relu" | "selu" | "softmax" | "sigmoid" => {
            b.check_attrs(&[])?;
            match b.kind.as_str() {
                "flatten" => Layer::Flatten,
                "gap" => Layer::GlobalAvgPool,
                "relu" => Layer::Activation(Activation::Relu),
                "selu" => Layer::Activation(Activation::Selu),
                "softmax" => Layer::Softmax,
                _ => Layer::Sigmoid,
            }
        }
        other => return fail(line, format!("unknown layer kind `{}`", truncate(other))),
    };
    b.finish(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_fc_model, build_simple_cnn, CnnConfig, FcConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fc_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = build_fc_model(
            &FcConfig {
                final_bn: true,
                first_bn: true,
                dropout: Some(0.25),
                ..FcConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        model.set_mode(Mode::Infer);
        let text = to_text(&model);
        assert!(text.starts_with("IBNL1\nmode infer\n"));
        assert_eq!(parse(&text).unwrap(), model);
    }

    #[test]
    fn cnn_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = build_simple_cnn(
            &CnnConfig {
                final_bn: true,
                ..CnnConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(parse(&to_text(&model)).unwrap(), model);
    }

    #[test]
    fn rejects_malformed_input() {
        let bad = [
            "",
            "IBNL2\nmode train\n",
            "IBNL1\nmode test\n",
            "IBNL1\nmode train\nlayer dense bias=true\nparam weight 2,1 1 2\nend\n",
            "IBNL1\nmode train\nlayer dense bias=false\nparam weight 2,1 1\nend\n",
            "IBNL1\nmode train\nlayer dense bias=false\nparam weight 2,1 1 NaN\nend\n",
            "IBNL1\nmode train\nlayer relu\n",
            "IBNL1\nmode train\nlayer relu extra=1\nend\n",
            "IBNL1\nmode train\nlayer mystery\nend\n",
            "IBNL1\nmode train\nparam x 1 1\n",
            "IBNL1\nmode train\nlayer dropout rate=1\nend\n",
            "IBNL1\nmode train\nlayer relu\nparam stray 1 0\nend\n",
            "IBNL1\nmode train\nlayer dense bias=false\nparam weight 99999999999,99999999999 1\nend\n",
        ];
        for text in bad {
            assert!(parse(text).is_err(), "accepted {text:?}");
        }
    }

    #[test]
    fn empty_model_is_valid() {
        let m = parse("IBNL1\nmode train\n").unwrap();
        assert!(m.layers().is_empty());
    }
}
