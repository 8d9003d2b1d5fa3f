use super::{Mode, ModelError};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{Tensor, TensorError, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-feature batch normalization: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// Train mode normalizes with the batch mean and population variance
/// (divisor `m`); infer mode uses the running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Batch statistics produced by a train-mode pass, applied to the running
/// estimates afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(num_features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[num_features]),
            beta: Tensor::zeros(&[num_features]),
            running_mean: vec![0.0; num_features],
            running_var: vec![1.0; num_features],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn num_features(&self) -> usize {
        self.gamma.len()
    }

    /// gamma, beta, running mean and running variance.
    pub fn parameter_count(&self) -> usize {
        4 * self.num_features()
    }

    /// Normalizes `x` using explicit `gamma`/`beta` variables so callers can
    /// differentiate with respect to them.
    pub fn forward_with<'t>(
        &self,
        x: Var<'t>,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: Mode,
    ) -> Result<(Var<'t>, Option<BatchStats>), ModelError> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(
                TensorError::Invalid(format!("batch norm expects [m×d], got {shape:?}")).into(),
            );
        }
        let (m, d) = (shape[0], shape[1]);
        if d != self.num_features() {
            return Err(ModelError::FeatureMismatch {
                expected: self.num_features(),
                got: d,
            });
        }
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(ModelError::BatchTooSmall(m));
                }
                let (y, stats) = x.batch_norm(gamma, beta, self.epsilon, None)?;
                let (mean, var) = stats.expect("train-mode batch norm returns statistics");
                debug_assert!(self.output_mean_matches_beta(y));
                Ok((y, Some(BatchStats { mean, var })))
            }
            Mode::Infer => {
                let (y, _) = x.batch_norm(
                    gamma,
                    beta,
                    self.epsilon,
                    Some((&self.running_mean, &self.running_var)),
                )?;
                Ok((y, None))
            }
        }
    }

    /// Convenience pass with gamma/beta recorded as constants; running
    /// statistics are updated in train mode.
    pub fn forward<'t>(&mut self, x: Var<'t>, mode: Mode) -> Result<Var<'t>, ModelError> {
        let tape = x.tape();
        let gamma = tape.constant(self.gamma.clone());
        let beta = tape.constant(self.beta.clone());
        let (y, stats) = self.forward_with(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.update_running(&stats);
        }
        Ok(y)
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let mom = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - mom) * *r + mom * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - mom) * *r + mom * b;
        }
    }

    fn output_mean_matches_beta(&self, y: Var<'_>) -> bool {
        y.with_value(|v| {
            let d = self.num_features();
            let m = v.len() / d;
            (0..d).all(|j| {
                let mean = v.data().iter().skip(j).step_by(d).sum::<f64>() / m as f64;
                let scale = 1.0 + self.gamma.data()[j].abs();
                (mean - self.beta.data()[j]).abs() <= 1e-9 * scale
            })
        })
    }
}

/// Finite-difference check of train-mode batch norm gradients with respect
/// to the input, gamma and beta. The scalar probed is `sum(y * r)` for a
/// fixed pattern `r`, since `sum(y)` has an identically zero input gradient.
pub fn batchnorm_backward_check(
    state: &BatchNormState,
    x: &Tensor,
) -> Result<GradCheckReport, ModelError> {
    if x.rank() != 2 {
        return Err(
            TensorError::Invalid(format!("batch norm expects [m×d], got {:?}", x.shape())).into(),
        );
    }
    if x.shape()[0] < 2 {
        return Err(ModelError::BatchTooSmall(x.shape()[0]));
    }
    if x.shape()[1] != state.num_features() {
        return Err(ModelError::FeatureMismatch {
            expected: state.num_features(),
            got: x.shape()[1],
        });
    }
    let probe: Vec<f64> = (0..x.len())
        .map(|i| ((i as f64) * 1.618_033_988_7).sin())
        .collect();
    let probe = Tensor::from_vec(x.shape(), probe)?;
    let inputs = [x.clone(), state.gamma.clone(), state.beta.clone()];
    let report = check_gradients(&inputs, |tape, vars| {
        let (y, _) = vars[0].batch_norm(vars[1], vars[2], state.epsilon, None)?;
        let r = tape.constant(probe.clone());
        y.mul(r)?.sum_all()
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn bn(d: usize) -> BatchNormState {
        BatchNormState::new(d)
    }

    #[test]
    fn fresh_state_is_identity_initialized() {
        let s = bn(3);
        assert_eq!(s.gamma.data(), &[1.0; 3]);
        assert_eq!(s.beta.data(), &[0.0; 3]);
        assert_eq!(s.running_mean, vec![0.0; 3]);
        assert_eq!(s.running_var, vec![1.0; 3]);
        assert_eq!(s.parameter_count(), 12);
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut s = bn(2);
        s.gamma = Tensor::new(&[2], &[3.0, -2.0]).unwrap();
        s.beta = Tensor::new(&[2], &[0.5, -1.5]).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], &[4.0, 7.0, 4.0, 7.0, 4.0, 7.0]).unwrap());
        let y = s.forward(x, Mode::Train).unwrap().value();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn four_sample_column() {
        // mean 2.5, population variance 1.25
        let mut s = bn(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = s.forward(x, Mode::Train).unwrap().value();
        let expect = [-1.341_635_7, -0.447_211_9, 0.447_211_9, 1.341_635_7];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((s.running_mean[0] - 0.25).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 + 0.125)).abs() < 1e-15);
    }

    #[test]
    fn infer_mode_with_fresh_stats_is_near_identity() {
        let mut s = bn(2);
        s.epsilon = 1e-12;
        let tape = Tape::new();
        let input = Tensor::new(&[1, 2], &[0.3, -7.0]).unwrap();
        let y = s
            .forward(tape.constant(input.clone()), Mode::Infer)
            .unwrap()
            .value();
        for (a, b) in y.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let mut s = bn(2);
        let tape = Tape::new();
        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert_eq!(
            s.forward(one, Mode::Train).unwrap_err(),
            ModelError::BatchTooSmall(1)
        );
        let wrong = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(matches!(
            s.forward(wrong, Mode::Train),
            Err(ModelError::FeatureMismatch {
                expected: 2,
                got: 3
            })
        ));
        // a single sample is fine at inference
        assert!(s.forward(one, Mode::Infer).is_ok());
    }

    #[test]
    fn backward_check_on_constant_and_minimal_batches() {
        let s = bn(3);
        let constant = Tensor::full(&[5, 3], 0.75);
        let report = batchnorm_backward_check(&s, &constant).unwrap();
        assert!(report.analytic[1].data().iter().all(|&g| g == 0.0));

        let x = Tensor::new(&[2, 3], &[0.1, -1.2, 2.0, 1.4, 0.3, -0.7]).unwrap();
        let report = batchnorm_backward_check(&s, &x).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
