//! Central finite-difference oracle for analytic gradients (64-bit only).
//!
//! The checked function may return any shape; it is reduced to a scalar by a
//! fixed pseudo-random projection so every output element contributes.
//! Callers keep inputs away from kinks (ReLU at 0, max-pool ties, BCE clamp
//! edges) by more than `h`.

use crate::autograd::{Tape, Var};
use crate::error::AutogradError;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Magnitude floor in the relative-error denominator. Roundoff in the
/// difference quotient is about `eps·|f|/h`, near 1e-10 for the small test
/// functions used here, so below this floor the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

fn projection(n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n], |i| ((i as f64) * 0.754_877_666 + 0.3).sin() + 0.1)
}

fn projected<'t, F>(tape: &'t Tape<f64>, inputs: &[Tensor<f64>], f: &F, grad: bool) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>), AutogradError>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>, AutogradError>,
{
    let vars = inputs
        .iter()
        .map(|t| if grad { tape.input(t.clone()) } else { tape.constant(t.clone()) })
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(tape, &vars)?;
    let n = out.value().numel();
    let r = tape.constant(projection(n).reshape(&out.shape())?)?;
    Ok((out.mul(&r)?.sum()?, vars))
}

/// Fourth-order central difference from `f(x±h)` and `f(x±2h)`. The plain
/// two-point rule leaves an O(h²) truncation error near 1e-10, which on its own
/// exceeds the tolerance for gradients below about 1e-6.
pub fn central_difference(p1: f64, m1: f64, p2: f64, m2: f64, h: f64) -> f64 {
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Compare analytic input gradients of `f` against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport, AutogradError>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>, AutogradError>,
{
    let tape = Tape::new();
    let (loss, vars) = projected(&tape, inputs, &f, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, AutogradError> {
        let tape = Tape::new();
        let (loss, _) = projected(&tape, inputs, &f, false)?;
        let v = loss.value().item();
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            let mut at = |d: f64| -> Result<f64, AutogradError> {
                work[ti].data_mut()[i] = orig + d;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[ti].data_mut()[i] = orig;
            let numeric = central_difference(p1, m1, p2, m2, h);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = (ti, i, a, numeric);
                }
            }
        }
    }
    Ok(report)
}
