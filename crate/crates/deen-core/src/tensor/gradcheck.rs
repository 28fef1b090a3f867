//! Central finite-difference verification of analytic gradients.
//!
//! Used by the test suites; lives in the library so the acceptance tests and
//! the unit tests share one implementation.

use crate::error::Result;

use super::Tensor;

/// Step size for central differences in double precision.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance where the analytic gradient is away from zero.
pub const REL_TOL: f64 = 1e-4;
/// Absolute tolerance near zero (|analytic| <= ZERO_BAND).
pub const ABS_TOL: f64 = 1e-6;
pub const ZERO_BAND: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Compare analytic gradients of `f` against central finite differences for
/// every element of every input. `f` must build a scalar loss from leaf
/// tensors created from the supplied (shape, values) pairs.
pub fn check_gradients<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(s, v)| Tensor::leaf(s, v.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(data)
            .map(|((s, _), v)| Tensor::leaf(s, v.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&ts)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    for (ti, (_, values)) in inputs.iter().enumerate() {
        for ei in 0..values.len() {
            let mut plus = base.clone();
            plus[ti][ei] += FD_STEP;
            let mut minus = base.clone();
            minus[ti][ei] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let an = analytic[ti][ei];
            let abs_err = (an - fd).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if an.abs() > ZERO_BAND {
                let rel = abs_err / an.abs().max(fd.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > REL_TOL {
                    report.failures += 1;
                }
            } else if abs_err > ABS_TOL {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
