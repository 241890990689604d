use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max_i |a_i - n_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central
/// differences with the given step and returns the worst relative error.
///
/// `f` receives a fresh tape and the leaf holding `params`; it must build
/// the same computation every time it is called.
pub fn finite_diff_check<F>(f: F, params: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    let mut tape = Tape::new();
    let p = tape.leaf_raw(params.shape().to_vec(), params.data().to_vec(), true)?;
    let loss = f(&mut tape, p)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; params.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.leaf_raw(params.shape().to_vec(), values, false)?;
        let loss = f(&mut tape, p)?;
        Ok(tape.value(loss)[0])
    };
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut plus = params.data().to_vec();
        plus[i] += step;
        let mut minus = params.data().to_vec();
        minus[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
