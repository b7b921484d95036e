//! Central-finite-difference gradient checking.
//!
//! The checker serves as the in-repo oracle for every backward rule: a
//! scalar-valued graph builder is evaluated with the tape's gradients and
//! again with two-sided finite differences per input entry, and the worst
//! relative disagreement is reported.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};

/// A named input tensor for a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckInput {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl GradCheckInput {
    pub fn new(name: &str, shape: &[usize], values: Vec<f64>) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), values }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Input name and flat entry index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative disagreement between an analytic and a numeric derivative.
/// Exact agreement (including 0 vs 0) scores 0; otherwise the absolute
/// difference is scaled by the larger magnitude, floored at 1e-6 so that
/// near-zero pairs are judged on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic == numeric {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval_scalar<F>(build: &F, inputs: &[GradCheckInput]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids = bind_inputs(&mut tape, inputs)?;
    let root = build(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Config(
            "gradcheck builder must return a scalar output".to_string(),
        ));
    }
    Ok(tape.scalar_value(root))
}

fn bind_inputs(tape: &mut Tape, inputs: &[GradCheckInput]) -> Result<Vec<TensorId>> {
    inputs
        .iter()
        .map(|inp| tape.leaf_named(&inp.name, &inp.shape, inp.values.clone()))
        .collect()
}

/// Checks the tape gradients of `build` against central differences with
/// step `h` over every entry of every input. Passes iff the maximum
/// relative error stays below `tol`.
pub fn gradcheck<F>(
    build: F,
    inputs: &[GradCheckInput],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in [1e-6, 1e-4], got {h}"
        )));
    }

    let mut tape = Tape::new();
    let ids = bind_inputs(&mut tape, inputs)?;
    let root = build(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(Error::Config(
            "gradcheck builder must return a scalar output".to_string(),
        ));
    }
    if !tape.scalar_value(root).is_finite() {
        return Err(Error::Numeric("non-finite value in gradcheck output".to_string()));
    }
    tape.backward(root)?;
    for (inp, &id) in inputs.iter().zip(&ids) {
        if tape.grad(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor '{}'",
                inp.name
            )));
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut entries = 0usize;
    for (i, inp) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(ids[i]).to_vec();
        for (j, &center) in inp.values.iter().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[i].values[j] = center + h;
            let plus = eval_scalar(&build, &shifted)?;
            shifted[i].values[j] = center - h;
            let minus = eval_scalar(&build, &shifted)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value while perturbing tensor '{}'",
                    inp.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            entries += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((inp.name.clone(), j));
            }
        }
    }

    Ok(GradCheckReport { max_rel_err, tolerance: tol, worst, entries_checked: entries })
}
