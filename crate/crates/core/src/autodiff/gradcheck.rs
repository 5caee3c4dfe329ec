//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    /// Set when the function under test failed; the error is then infinite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<S: Scalar, F>(f: &F, inputs: &[Tensor<S>]) -> Result<f64>
where
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.try_value(out)?.sum().as_f64())
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` on every coordinate of every input.
///
/// Never fails: errors raised by `f` are reported in [`GradCheckReport::failure`].
pub fn grad_check<S: Scalar, F>(f: F, inputs: &[Tensor<S>], eps: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        coordinates: 0,
        failure: Some(msg),
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let analytic: Vec<Tensor<S>> = match f(&mut tape, &vars).and_then(|out| {
        let loss = tape.sum(out)?;
        tape.backward(loss)
    }) {
        Ok(()) => vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect(),
        Err(e) => return fail(e.to_string()),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        failure: None,
    };
    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for c in 0..grad.numel() {
            let orig = probe[k].data()[c];
            probe[k].data_mut()[c] = orig + S::lit(eps);
            let plus = evaluate(&f, &probe);
            probe[k].data_mut()[c] = orig - S::lit(eps);
            let minus = evaluate(&f, &probe);
            probe[k].data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return fail(e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.data()[c].as_f64(), numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((k, c));
                }
            }
        }
    }
    report
}
