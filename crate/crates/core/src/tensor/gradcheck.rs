use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Absolute floor in the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(invalid("grad_check", "function must return a scalar"));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok((tape, vars, out))
}

/// Central-difference check of `f` against [`Tape::backward`] over every
/// coordinate of every input. Inputs are treated as differentiable.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let mut inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let (tape, vars, out) = eval(&f, &inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    drop(tape);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for ti in 0..inputs.len() {
        for c in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[c];
            inputs[ti].data_mut()[c] = orig + h;
            let (tp, _, op) = eval(&f, &inputs)?;
            let fp = tp.value(op)[0];
            inputs[ti].data_mut()[c] = orig - h;
            let (tm, _, om) = eval(&f, &inputs)?;
            let fm = tm.value(om)[0];
            inputs[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][c];
            let e = rel_error(a, numeric);
            report.coordinates += 1;
            if e > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = e;
                report.worst = (ti, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), h)
}
