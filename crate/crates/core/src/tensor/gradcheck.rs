//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure, so it shares no
//! code with the backward rules it is used to verify.

use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Worst disagreement found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all checked entries.
    pub max_rel_err: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must build a scalar from the provided leaves and must be
/// deterministic (no dropout in training mode).
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
