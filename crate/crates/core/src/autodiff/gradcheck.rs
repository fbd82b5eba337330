//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Compares tape gradients of `f` at `xs` with central differences and
/// returns the largest `|analytic - numeric| / max(1, |numeric|)` over all
/// coordinates of all inputs.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let first = evaluate(&f, xs)?;
    let second = evaluate(&f, xs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Numeric(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .ok_or_else(|| Error::Tape("missing gradient".into()))?;
        for i in 0..xs[t].len() {
            let orig = xs[t].values()[i];
            probe[t].values_mut()[i] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[t].values_mut()[i] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[t].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.values()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, &vars[0]), std::slice::from_ref(x), eps)
}
