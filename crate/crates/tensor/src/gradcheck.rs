//! Central finite-difference gradient checks (run in `f64`).

use crate::error::Result;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error. Components whose gradients are
/// both below this are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the scalar `f(inputs)` w.r.t. every
/// element of every input against `(f(x+h) - f(x-h)) / 2h`.
///
/// Inputs are marked trainable for the duration of the check.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for x in inputs {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    f(inputs)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (x, grad) in inputs.iter().zip(&analytic) {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let plus = f(inputs)?.item();
            x.data_mut()[i] = orig - h;
            let minus = f(inputs)?.item();
            x.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    for x in inputs {
        x.zero_grad();
    }
    Ok(report)
}
