//! Central-difference gradient oracle.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over every coordinate.
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of `f` at `params`, one tensor per parameter.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

/// Compare supplied analytic gradients against central differences with step `h`.
pub fn compare_gradients<F>(f: &F, params: &[Tensor], analytic: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let x0 = p.data()[i];
            work[pi].data_mut()[i] = x0 + h;
            let up = eval_scalar(f, &work)?;
            work[pi].data_mut()[i] = x0 - h;
            let down = eval_scalar(f, &work)?;
            work[pi].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (pi, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

/// Check the tape's gradients of scalar function `f` against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, h, tol)
}
