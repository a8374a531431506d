//! Central finite-difference validation of tape gradients (f64 only).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst-case disagreement found by [`grad_check_many`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest relative error left after discounting the rounding bound of
    /// each difference quotient. Tiny gradients whose disagreement is pure
    /// cancellation noise score 0 here while `max_rel_err` can be large.
    pub max_excess_rel_err: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    excess_rel_err(analytic, numeric, 0.0)
}

/// Like [`rel_err`] but only the part of `|a - n|` above `noise` counts.
pub fn excess_rel_err(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of scalar `f` w.r.t. every element of every input
/// against central differences with step `h`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut worst =
        GradCheckReport { max_rel_err: 0.0, max_excess_rel_err: 0.0, input: 0, element: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for e in 0..x.numel() {
            let orig = x.data()[e];
            probe[i].data_mut()[e] = orig + h;
            let up = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[e] = orig - h;
            let down = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[e];
            // One rounding of each evaluation, carried through the quotient.
            let noise = f64::EPSILON * (up.abs() + down.abs()) / (2.0 * h);
            worst.max_excess_rel_err = worst.max_excess_rel_err.max(excess_rel_err(a, numeric, noise));
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err {
                worst = GradCheckReport { max_rel_err: err, input: i, element: e, analytic: a, numeric, ..worst };
            }
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h).map(|r| r.max_rel_err)
}
