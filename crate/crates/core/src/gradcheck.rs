//! Central finite-difference check of tape gradients.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("grad_check: step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("grad_check: objective is not deterministic ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("grad_check: objective failed: {0}")]
    Objective(Box<crate::Error>),
}

impl From<crate::Error> for GradCheckError {
    fn from(e: crate::Error) -> Self {
        GradCheckError::Objective(Box::new(e))
    }
}

/// Returns the max over all entries of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` builds a scalar objective on the given tape from leaf handles of
/// `params` (order preserved). It is called once with gradient-tracking
/// leaves and twice per parameter entry for the difference quotient.
pub fn grad_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(GradCheckError::BadStep(h));
    }
    let base: Vec<Tensor> = params.to_vec();
    let a = evaluate(&mut f, &base)?;
    let b = evaluate(&mut f, &base)?;
    if a.to_bits() != b.to_bits() {
        return Err(GradCheckError::NonDeterministic(a, b));
    }
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter().map(|&v| tape.grad(v).expect("leaf requires grad").to_vec()).collect::<Vec<_>>()
    };

    let mut worst: f64 = 0.0;
    let mut work = base;
    for (pi, grads) in analytic.iter().enumerate() {
        for k in 0..grads.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let fp = evaluate(&mut f, &work)?;
            work[pi].data_mut()[k] = orig - h;
            let fm = evaluate(&mut f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (grads[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &mut F, values: &[Tensor]) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item().unwrap_or(f64::NAN))
}
