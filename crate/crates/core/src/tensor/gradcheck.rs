//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the backward rules.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient norms below this are indistinguishable from finite-difference
/// round-off, e.g. attention key biases, whose true gradient is zero.
pub const NOISE_FLOOR: f64 = 1e-6;

/// `|a - b|₂ / max(|a|₂, |b|₂, NOISE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(NOISE_FLOOR)
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Analytic gradients of `build` w.r.t. every input.
pub fn analytic_gradients<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central difference of `build` w.r.t. element `elem` of input `input`.
pub fn numeric_partial<F>(
    build: &F,
    inputs: &[Tensor],
    input: usize,
    elem: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let orig = work[input].data()[elem];
    work[input].data_mut()[elem] = orig + h;
    let plus = eval(build, &work)?;
    work[input].data_mut()[elem] = orig - h;
    let minus = eval(build, &work)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Relative error per input over all elements.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let numeric = (0..t.numel())
            .map(|e| numeric_partial(&build, inputs, i, e, h))
            .collect::<Result<Vec<_>>>()?;
        errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errors)
}

/// Worst per-input relative error (see [`check_gradients`]).
pub fn max_relative_error<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(check_gradients(build, inputs, h)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Relative error restricted to the `(input, element)` pairs in `sample`,
/// compared as one stacked vector.
pub fn check_sampled<F>(build: F, inputs: &[Tensor], sample: &[(usize, usize)], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    let mut a = Vec::with_capacity(sample.len());
    let mut n = Vec::with_capacity(sample.len());
    for &(i, e) in sample {
        a.push(analytic[i][e]);
        n.push(numeric_partial(&build, inputs, i, e, h)?);
    }
    Ok(relative_error(&a, &n))
}
