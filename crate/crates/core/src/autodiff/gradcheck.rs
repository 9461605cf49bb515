//! Central-finite-difference verification of recorded gradients.

use super::tape::{ParamId, Tape, Val};
use super::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: worst rel err {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e}, tol {:.1e})",
            if self.passed { "pass" } else { "FAIL" },
            self.worst_rel_err,
            self.worst_coord,
            self.analytic_at_worst,
            self.numeric_at_worst,
            self.tol
        )
    }
}

/// Relative error with an absolute floor so tiny gradients are compared
/// absolutely instead of blowing up the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

/// Checks the gradient of a scalar-valued function at `point` by
/// central differences, coordinate by coordinate.
///
/// `f` must be deterministic across invocations: if it uses dropout or
/// other randomness it has to reseed internally so every call sees the
/// same draw.
pub fn grad_check<F>(mut f: F, point: &Tensor, eps: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&mut Tape, Val) -> Val,
{
    let pid = ParamId(0);
    let mut tape = Tape::training();
    let x = tape.param(pid, point.clone());
    let y = f(&mut tape, x);
    assert!(
        tape.value(y).is_scalar(),
        "grad_check requires a scalar-valued function, got shape {:?}",
        tape.value(y).shape()
    );
    let mut grads = tape.backward(y).expect("scalar loss on same tape");
    let analytic = grads
        .take(pid)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let mut eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::training();
        let x = tape.param(pid, t.clone());
        let y = f(&mut tape, x);
        tape.value(y).item()
    };

    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        passed: true,
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = rel_err(a, numeric);
        if err > report.worst_rel_err {
            report.worst_rel_err = err;
            report.worst_coord = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.worst_rel_err < tol;
    report
}
