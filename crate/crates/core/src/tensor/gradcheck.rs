use super::{Tape, Tensor, Var};
use crate::error::{Result, WaveError};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Max over checked coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+ε) - f(x-ε)) / 2ε` on every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, eps, tol)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor,
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(WaveError::Argument(format!("finite-difference step {eps}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, tape.constant(point.clone()))?;
        scalar_of(&out)
    };

    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&tape, xv)?;
        scalar_of(&out)?;
        tape.backward(out)?.get(xv)
    };

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        passed: true,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(WaveError::Argument(format!("coordinate {i} of {}", x.numel())));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    let value = v.value();
    if value.numel() != 1 {
        return Err(WaveError::Argument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}
