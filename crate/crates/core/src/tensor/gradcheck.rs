//! Central finite differences against the tape's analytic gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Step used for `(f(x+h) - f(x-h)) / 2h`.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that entries that are zero up to rounding do not divide by ~0.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every input element.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor, in input order.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// finite differences of the same forward computation.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        out.item()
            .ok_or_else(|| TensorError::NotScalar(out.shape().to_vec()))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.len()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let worst = grad
            .iter()
            .zip(analytic[i].data())
            .map(|(&n, &a)| relative_error(a, n))
            .fold(0.0, f64::max);
        per_input.push(worst);
        numeric.push(Tensor::from_vec(input.shape(), grad)?);
    }

    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        analytic,
        numeric,
    })
}
